"""Deterministic discrete-event loop tying workload, engine, scheduler and robots."""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import Engine, EngineCostModel, GenerationState, StopRule
from .scheduler import Policy, QueuedTask, Scheduler, SchedulerConfig
from .workload import (
    ArrivalEvent,
    ExecutionTimeModel,
    Mode,
    SkillCall,
    TraceCategory,
    TraceLibrary,
    UnknownSkill,
    WorkloadSpec,
    builtin_library,
    compose_workload,
    sample_execution_time,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NonQuiescent(RuntimeWarning):
    """The wall-clock cap was reached with work still pending."""


class EventKind(str, enum.Enum):
    ARRIVAL = "Arrival"
    ADMIT = "Admit"
    ITERATION_DONE = "IterationDone"
    SUSPEND = "Suspend"
    RESUME = "Resume"
    SEGMENT_DISPATCHED = "SegmentDispatched"
    ACTION_START = "ActionStart"
    ACTION_END = "ActionEnd"
    REQUEST_COMPLETE = "RequestComplete"
    ADMISSION_REFUSED = "AdmissionRefused"
    REQUEST_ABORTED = "RequestAborted"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    request_id: int
    agent_id: int
    payload: dict = field(default_factory=dict)


CSV_HEADER = ("time_s", "kind", "request_id", "agent_id", "payload")


class EventLog:
    def __init__(self, events: list[SimEvent] | None = None, meta: dict | None = None):
        self.events: list[SimEvent] = events if events is not None else []
        self.meta = meta or {}

    def append(self, ev: SimEvent) -> None:
        self.events.append(ev)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def of_kind(self, *kinds: EventKind) -> list[SimEvent]:
        return [e for e in self.events if e.kind in kinds]

    def for_request(self, request_id: int) -> list[SimEvent]:
        return [e for e in self.events if e.request_id == request_id]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e in self.events:
            w.writerow((repr(float(e.time)), e.kind.value, e.request_id, e.agent_id,
                        json.dumps(e.payload, sort_keys=True)))
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EventLog":
        rows = csv.reader(io.StringIO(text))
        header = next(rows)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected event log header {header}")
        evs = [
            SimEvent(float(t), EventKind(k), int(r), int(a), json.loads(p))
            for t, k, r, a, p in rows
        ]
        return cls(evs)

    @classmethod
    def read_csv(cls, path: str | Path) -> "EventLog":
        return cls.from_csv(Path(path).read_text())


@dataclass
class AgentSegment:
    request_id: int
    k: int
    dispatch: float
    start: float
    end: float
    min_exec: float


@dataclass
class AgentState:
    agent_id: int
    busy_until: float = float("-inf")
    pending_segments: list[AgentSegment] = field(default_factory=list)

    def estimated_end(self, now: float, network_latency_s: float) -> float | None:
        """When the agent is expected to be done with everything dispatched.

        Uses actual start times of actions that have begun and minimum
        execution times everywhere else; never peeks at sampled durations.
        """
        est = None
        for seg in self.pending_segments:
            if seg.end <= now:
                est = seg.end if est is None else max(est, seg.end)
            elif seg.start <= now:
                est = max(now, seg.start + seg.min_exec)
            else:
                ready = seg.dispatch + network_latency_s
                est = (ready if est is None else max(ready, est)) + seg.min_exec
        return est

    def prune(self, now: float) -> None:
        # keep the most recent finished segment as the chain anchor
        while len(self.pending_segments) > 1 and self.pending_segments[0].end <= now \
                and self.pending_segments[1].end <= now:
            self.pending_segments.pop(0)


def robot_execute(
    agent: AgentState, request_id: int, k: int, duration: float, min_exec: float,
    dispatch_time: float, network_latency_s: float,
) -> tuple[float, float]:
    """Place a dispatched segment on the agent's timeline; returns (start, end)."""
    start = max(dispatch_time + network_latency_s, agent.busy_until)
    end = start + duration
    agent.busy_until = end
    agent.pending_segments.append(AgentSegment(request_id, k, dispatch_time, start, end, min_exec))
    return start, end


@dataclass
class RequestInfo:
    request_id: int
    trace_id: int
    agent_id: int
    arrival: float
    category: str
    dispatched: int = 0
    pending_actions: int = 0
    gen_done: bool = False
    complete: bool = False
    aborted: bool = False


@dataclass
class SimConfig:
    library: TraceLibrary | None = None
    engine: EngineCostModel = field(default_factory=EngineCostModel)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    workload: WorkloadSpec | None = None
    arrivals: list[ArrivalEvent] | None = None
    seed: int = 0
    wall_cap_s: float | None = None
    stop_rule: StopRule | None = None
    exec_model: ExecutionTimeModel | None = None

    def __post_init__(self):
        if self.library is None:
            self.library = builtin_library()
        if self.workload is None and self.arrivals is None:
            raise ConfigError("need a workload config or an explicit arrival list")

    def resolved_arrivals(self) -> list[ArrivalEvent]:
        if self.arrivals is not None:
            arr = list(self.arrivals)
        else:
            arr = compose_workload(self.workload, self.library)
        for a in arr:
            if a.trace_id not in self.library:
                raise ConfigError(f"arrival references unknown trace {a.trace_id}")
        return sorted(arr, key=lambda a: (a.time, a.event_index, a.agent_id))

    def resolved_stop_rule(self, arrivals) -> StopRule:
        if self.stop_rule is not None:
            return self.stop_rule
        if self.scheduler.policy is Policy.FCFS_BATCH:
            return StopRule.none()
        cats = {self.library[a.trace_id].category for a in arrivals}
        if cats == {TraceCategory.CHATBOT}:
            return StopRule.sentence()
        return StopRule.skill_pattern(self.library.skill_names())

    def cap(self, arrivals) -> float:
        if self.wall_cap_s is not None:
            return self.wall_cap_s
        horizon = self.workload.duration if self.workload is not None else \
            (arrivals[-1].time if arrivals else 0.0)
        return horizon + 120.0


@dataclass
class SimResult:
    log: EventLog
    requests: dict[int, RequestInfo]
    quiescent: bool
    engine_busy_ms: float
    engine_iteration_ms: float
    engine_restore_ms: float
    config: SimConfig


# simultaneous events: free resources before taking new demand
_PRECEDENCE = {"ActionEnd": 0, "ActionStart": 1, "IterationDone": 2, "Arrival": 3, "Wakeup": 4}


class Simulation:
    def __init__(self, config: SimConfig,
                 scheduler_factory: Callable[[SchedulerConfig, float], Scheduler] | None = None):
        self.config = config
        self.lib = config.library
        self.exec_model = config.exec_model or self.lib.exec_model
        self.arrivals = config.resolved_arrivals()
        self.net_s = config.engine.network_latency_ms / 1000.0
        sc = config.scheduler
        self.policy = sc.policy
        self.engine = Engine(
            config.engine,
            config.resolved_stop_rule(self.arrivals),
            max_segment_tokens=sc.max_segment_tokens,
            suspend_at_boundaries=self.policy.segmented,
        )
        factory = scheduler_factory or (lambda c, n: Scheduler(c, n))
        self.sched = factory(sc, self.net_s)
        self.log = EventLog(meta={"policy": self.policy.value, "seed": config.seed})
        self.agents: dict[int, AgentState] = {}
        self.requests: dict[int, RequestInfo] = {}
        self.gens: dict[int, GenerationState] = {}
        self.tasks: dict[int, QueuedTask] = {}
        self._heap: list = []
        self._seq = itertools.count()
        self._busy = False
        self._wakeup_at: float | None = None

    # -- plumbing ---------------------------------------------------------

    def _push(self, t: float, kind: str, rid: int, data=None) -> None:
        heapq.heappush(self._heap, (t, _PRECEDENCE[kind], rid, next(self._seq), kind, data))

    def _emit(self, t: float, kind: EventKind, rid: int, agent: int, **payload) -> None:
        self.log.append(SimEvent(t, kind, rid, agent, payload))

    def _mem(self) -> dict:
        return {
            "free_mb": round(self.engine.free_gpu_memory(), 6),
            "resident_mb": round(self.engine.resident_mb(), 6),
            "capacity_mb": self.engine.model.gpu_memory_mb,
        }

    def _agent(self, aid: int) -> AgentState:
        if aid not in self.agents:
            self.agents[aid] = AgentState(aid)
        return self.agents[aid]

    def _durations(self, rid: int, items: tuple[SkillCall, ...], first_index: int) -> tuple[float, float]:
        total = 0.0
        mins = 0.0
        for j, s in enumerate(items):
            rng = np.random.default_rng([self.config.seed, rid, first_index + j])
            total += sample_execution_time(self.exec_model, s, Mode.SAMPLE, rng)
            mins += sample_execution_time(self.exec_model, s, Mode.MIN)
        return total, mins

    # -- main loop --------------------------------------------------------

    def run(self) -> SimResult:
        for rid, a in enumerate(self.arrivals):
            self._push(a.time, "Arrival", rid, a)
        cap = self.config.cap(self.arrivals)
        quiescent = True
        while self._heap:
            t, _, rid, _, kind, data = heapq.heappop(self._heap)
            if t > cap:
                quiescent = False
                break
            getattr(self, f"_on_{kind}")(t, rid, data)
        if quiescent and any(not (r.complete or r.aborted) for r in self.requests.values()):
            quiescent = False
        if not quiescent:
            log.warning("simulation stopped at cap %.1f s with work pending", cap)
        return SimResult(
            self.log, self.requests, quiescent, self.engine.busy_ms,
            self.engine.iteration_ms_total, self.engine.restore_ms_total, self.config,
        )

    def _on_Arrival(self, t: float, rid: int, a: ArrivalEvent) -> None:
        trace = self.lib[a.trace_id]
        self.requests[rid] = RequestInfo(rid, a.trace_id, a.agent_id, t, trace.category.value)
        gen = GenerationState(rid, a.agent_id, trace, self.engine.max_segment_tokens)
        self.gens[rid] = gen
        self._emit(t, EventKind.ARRIVAL, rid, a.agent_id, trace_id=a.trace_id,
                   urgency=trace.urgency.kind.value, event_index=a.event_index,
                   tuf=trace.urgency.tuf.to_dict())
        self.tasks[rid] = self.sched.on_arrival(gen, t)
        self._kick(t)

    def _on_Wakeup(self, t: float, rid: int, data) -> None:
        if self._wakeup_at == t:
            self._wakeup_at = None
        self._kick(t)

    def _on_ActionStart(self, t: float, rid: int, data) -> None:
        k, duration = data
        self._emit(t, EventKind.ACTION_START, rid, self.requests[rid].agent_id,
                   k=k, duration_s=duration)

    def _on_ActionEnd(self, t: float, rid: int, data) -> None:
        info = self.requests[rid]
        self._emit(t, EventKind.ACTION_END, rid, info.agent_id, k=data)
        info.pending_actions -= 1
        self._agent(info.agent_id).prune(t)
        if info.gen_done and info.pending_actions == 0 and not info.aborted:
            info.complete = True
            self._emit(t, EventKind.REQUEST_COMPLETE, rid, info.agent_id,
                       segments=info.dispatched, text=self.gens[rid].text)

    def _on_IterationDone(self, t: float, rid: int, res) -> None:
        self._busy = False
        eng = self.engine
        self._emit(t, EventKind.ITERATION_DONE, -1, -1, batch=res.batch_size,
                   latency_ms=res.latency_ms, restore_ms=res.restore_ms,
                   members=sorted(e.request_id for e in res.emissions), **self._mem())
        for r in sorted(res.boundaries):
            b = res.boundaries[r]
            gen = self.gens[r]
            info = self.requests[r]
            items = eng.take_segment(gen) if (b.end_of_plan or self.policy.streams) else ()
            suspended = False
            if b.end_of_plan:
                eng.finish(gen)
                info.gen_done = True
            elif self.policy.segmented:
                receipt = eng.suspend(gen, t)
                suspended = True
                self._emit(t, EventKind.SUSPEND, r, info.agent_id, k=gen.segment_index - 1,
                           reason=b.reason.value, kv_mb=receipt.kv_size_mb,
                           snapshot_tokens=len(receipt.token_snapshot),
                           snapshot_bytes=receipt.snapshot_bytes)
            if items:
                try:
                    self._dispatch(t, r, items, b.reason.value)
                except UnknownSkill as e:
                    self._abort(t, r, f"unknown skill {e.args[0]!r}")
                    continue
            if suspended:
                agent = self._agent(info.agent_id)
                est = agent.estimated_end(t, self.net_s) if info.dispatched else None
                prev = self.tasks[r]
                self.tasks[r] = self.sched.on_segment_complete(gen, prev, bool(items), est, t)
            if info.gen_done and info.pending_actions == 0 and not info.complete:
                # every action already finished (possible with empty final segment)
                info.complete = True
                self._emit(t, EventKind.REQUEST_COMPLETE, r, info.agent_id,
                           segments=info.dispatched, text=gen.text)
        self._kick(t)

    # -- actions ----------------------------------------------------------

    def _dispatch(self, t: float, rid: int, items, reason: str) -> None:
        info = self.requests[rid]
        gen = self.gens[rid]
        first_index = gen.items_dispatched - len(items)
        duration, min_exec = self._durations(rid, items, first_index)
        k = info.dispatched
        info.dispatched += 1
        info.pending_actions += 1
        self._emit(t, EventKind.SEGMENT_DISPATCHED, rid, info.agent_id, k=k,
                   skills=[s.name for s in items], text=self.engine.segment_text(items),
                   reason=reason)
        start, end = robot_execute(self._agent(info.agent_id), rid, k, duration, min_exec,
                                   t, self.net_s)
        self._push(start, "ActionStart", rid, (k, duration))
        self._push(end, "ActionEnd", rid, k)

    def _abort(self, t: float, rid: int, why: str) -> None:
        info = self.requests[rid]
        info.aborted = True
        gen = self.gens[rid]
        if gen.status.value != "Finished":
            self.engine.finish(gen)
        self._emit(t, EventKind.REQUEST_ABORTED, rid, info.agent_id, error=why)

    def _kick(self, t: float) -> None:
        """Run admission and start an iteration if the engine is free."""
        if self._busy:
            return
        admitted, refused = self.sched.select_policy_step(self.engine, t)
        for task, restore_ms in admitted:
            kind = EventKind.ADMIT if task.segment_index == 0 else EventKind.RESUME
            extra = {}
            note = self.sched.admission_notes.pop(task.request_id, None)
            if note is not None:
                extra = {"protected": note[0], "protected_deadline": note[1]}
            self._emit(t, kind, task.request_id, task.agent_id, k=task.segment_index,
                       restore_ms=restore_ms, deadline=task.deadline,
                       priority=task.priority if self.policy is Policy.SEG_PUD else None,
                       **extra, **self._mem())
        if refused:
            head = self.sched.queue.peek()
            self._emit(t, EventKind.ADMISSION_REFUSED, head.request_id, head.agent_id,
                       queued=len(self.sched.queue), running=len(self.engine.running))
        if self.engine.running:
            res = self.engine.step_iteration(t)
            self._busy = True
            self._push(res.end, "IterationDone", -1, res)
        else:
            wake = self.sched.next_wakeup(t)
            if wake is not None and wake > t and self._wakeup_at != wake:
                self._wakeup_at = wake
                self._push(wake, "Wakeup", -1, None)


def run(config: SimConfig, **kw) -> SimResult:
    return Simulation(config, **kw).run()
