"""Priority scheduling of initial and suspended generations.

The default policy ranks queued segments by potential utility density scaled
by slack: the utility the segment would earn if its generation began now,
divided by its generation-time estimate and by the time left before its
deadline. Follow-up segments are due when the robot is estimated to finish
the previously dispatched actions, so they rise in priority as that moment
approaches. Admission into the running batch is gated by a worst-case
completion estimate for the most urgent running generation and by free KV
memory.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field

from .engine import Engine, GenerationState
from .tuf import TimeUtilityFunction, eval_tuf, eval_tuf_suspended


class UnknownPolicy(ValueError):
    pass


class Policy(str, enum.Enum):
    SEG_PUD = "SegPUD"
    SEG_FCFS = "SegFCFS"
    SEG_EDF = "SegEDF"
    FCFS_BATCH = "FCFSBatch"
    STREAM_FCFS = "StreamFCFS"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        for p in cls:
            if p.value.lower() == name.strip().lower():
                return p
        raise UnknownPolicy(f"unknown policy {name!r}; choose from {[p.value for p in cls]}")

    @property
    def segmented(self) -> bool:
        """Whether generations are suspended at segment boundaries."""
        return self not in (Policy.FCFS_BATCH, Policy.STREAM_FCFS)

    @property
    def streams(self) -> bool:
        """Whether completed skills are dispatched before the plan ends."""
        return self is not Policy.FCFS_BATCH


@dataclass
class SchedulerConfig:
    policy: Policy = Policy.SEG_PUD
    # None: segmented policies use latency-guided admission, baselines use
    # the default cap below
    max_batch_size: int | None = None
    baseline_batch_size: int = 16
    gen_estimate_s: float = 0.09
    gen_estimate_overrides: dict = field(default_factory=dict)
    slack_floor_s: float = 0.001
    denominator_floor: float = 1e-6
    speed_window: int = 5
    max_segment_tokens: int = 10

    def __post_init__(self):
        if isinstance(self.policy, str) and not isinstance(self.policy, Policy):
            self.policy = Policy.parse(self.policy)
        if self.max_batch_size is not None and self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.policy.segmented and self.max_batch_size is None

    @property
    def batch_cap(self) -> int | None:
        if self.max_batch_size is not None:
            return self.max_batch_size
        return None if self.policy.segmented else self.baseline_batch_size

    def gen_estimate(self, trace_id: int) -> float:
        return float(self.gen_estimate_overrides.get(trace_id, self.gen_estimate_s))

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "max_batch_size": self.max_batch_size,
            "baseline_batch_size": self.baseline_batch_size,
            "gen_estimate_s": self.gen_estimate_s,
            "gen_estimate_overrides": {str(k): v for k, v in self.gen_estimate_overrides.items()},
            "slack_floor_s": self.slack_floor_s,
            "denominator_floor": self.denominator_floor,
            "speed_window": self.speed_window,
            "max_segment_tokens": self.max_segment_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerConfig":
        d = dict(d)
        if "gen_estimate_overrides" in d:
            d["gen_estimate_overrides"] = {int(k): float(v) for k, v in d["gen_estimate_overrides"].items()}
        return cls(**d)


@dataclass
class QueuedTask:
    request_id: int
    agent_id: int
    segment_index: int
    arrival_time: float
    deadline: float
    tuf: TimeUtilityFunction
    gen_estimate_s: float
    initial_deadline: float
    prev_action_end_estimate: float | None = None
    priority: float = 0.0
    gen: GenerationState | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.gen_estimate_s > 0:
            raise ValueError("gen_estimate_s must be > 0")

    @property
    def first(self) -> bool:
        """True while no action of the request has been dispatched yet."""
        return self.prev_action_end_estimate is None


def estimated_waiting(task: QueuedTask, t: float, network_latency_s: float = 0.0) -> float:
    """Waiting the segment would incur if its generation started at ``t``."""
    ready = t + task.gen_estimate_s + network_latency_s
    if task.first:
        return ready - task.arrival_time
    return ready - task.prev_action_end_estimate


def slack(task: QueuedTask, t: float, floor: float = 0.001) -> float:
    return max(floor, task.deadline - t - task.gen_estimate_s)


def priority(
    task: QueuedTask,
    t: float,
    network_latency_s: float = 0.0,
    slack_floor: float = 0.001,
    denominator_floor: float = 1e-6,
) -> float:
    w = estimated_waiting(task, t, network_latency_s)
    u = eval_tuf(task.tuf, w) if task.first else eval_tuf_suspended(task.tuf, w)
    denom = max(denominator_floor, task.gen_estimate_s * slack(task, t, slack_floor))
    return u / denom


class TaskQueue:
    """Priority queue whose order depends on the policy and the current time."""

    def __init__(self, policy: Policy, network_latency_s: float = 0.0,
                 slack_floor: float = 0.001, denominator_floor: float = 1e-6):
        self.policy = policy
        self.network_latency_s = network_latency_s
        self.slack_floor = slack_floor
        self.denominator_floor = denominator_floor
        self._heap: list = []
        self._seq = itertools.count()

    def __len__(self):
        return len(self._heap)

    def __iter__(self):
        return (entry[-1] for entry in self._heap)

    def _key(self, task: QueuedTask):
        if self.policy is Policy.SEG_PUD:
            return (-task.priority, task.arrival_time, task.request_id)
        if self.policy is Policy.SEG_EDF:
            return (task.initial_deadline, task.arrival_time, task.request_id)
        return (task.arrival_time, task.request_id)

    def _refresh(self, task: QueuedTask, t: float) -> None:
        task.priority = priority(task, t, self.network_latency_s,
                                 self.slack_floor, self.denominator_floor)

    def push(self, task: QueuedTask, t: float) -> None:
        self._refresh(task, t)
        heapq.heappush(self._heap, (self._key(task), next(self._seq), task))

    def update_all_priorities(self, t: float) -> None:
        if not self._heap:
            return
        tasks = [e[-1] for e in self._heap]
        for task in tasks:
            self._refresh(task, t)
        self._heap = [(self._key(task), next(self._seq), task) for task in tasks]
        heapq.heapify(self._heap)

    def peek(self) -> QueuedTask | None:
        return self._heap[0][-1] if self._heap else None

    def pop(self) -> QueuedTask:
        return heapq.heappop(self._heap)[-1]

    def ordered(self) -> list[QueuedTask]:
        return [e[-1] for e in sorted(self._heap)]


def per_token_estimate_ms(engine: Engine, gen: GenerationState, batch_size: int,
                          window: int = 5) -> float:
    """Latency per token for ``gen`` if the batch held ``batch_size`` members.

    Each recent observation is normalised by the steady-state latency of the
    batch it was observed in, then rescaled to ``batch_size``.
    """
    m = engine.model
    checking = engine.stop_rule.kind.value != "None"
    target = m.steady_iteration_ms(batch_size, checking)
    recent = list(gen.recent)[-window:]
    if not recent:
        return target
    ratios = [obs / m.steady_iteration_ms(b, checking) for obs, b in recent]
    return target * sum(ratios) / len(ratios)


def wcet_ms(engine: Engine, gen: GenerationState, batch_size: int, window: int = 5) -> float:
    remaining = max(0, gen.max_segment_tokens - gen.tokens_in_current_segment)
    return remaining * per_token_estimate_ms(engine, gen, batch_size, window)


class Scheduler:
    def __init__(self, config: SchedulerConfig, network_latency_s: float = 0.0):
        self.config = config
        self.policy = config.policy
        self.network_latency_s = network_latency_s
        self.queue = TaskQueue(config.policy, network_latency_s,
                               config.slack_floor_s, config.denominator_floor)
        self.deadlines: dict[int, float] = {}
        self.refusals = 0
        # request id -> (protected request id, its deadline) for the latest admission
        self.admission_notes: dict[int, tuple[int, float]] = {}
        self._last_protected: tuple[int, float] | None = None
        self._queued: set[int] = set()

    # -- queue entry points ----------------------------------------------

    def _push(self, task: QueuedTask, now: float) -> None:
        if task.request_id in self._queued:
            raise RuntimeError(f"request {task.request_id} already queued")
        self._queued.add(task.request_id)
        self.queue.push(task, now)

    def on_arrival(self, gen: GenerationState, arrival: float) -> QueuedTask:
        tuf = gen.trace.urgency.tuf
        task = QueuedTask(
            request_id=gen.request_id,
            agent_id=gen.agent_id,
            segment_index=0,
            arrival_time=arrival,
            deadline=arrival + tuf.ert,
            tuf=tuf,
            gen_estimate_s=self.config.gen_estimate(gen.trace.trace_id),
            initial_deadline=arrival + tuf.ert,
            gen=gen,
        )
        self._push(task, arrival)
        return task

    def on_segment_complete(
        self,
        gen: GenerationState,
        prev: QueuedTask,
        dispatched: bool,
        action_end_estimate: float | None,
        now: float,
    ) -> QueuedTask | None:
        """Queue the follow-up segment of a suspended generation.

        ``action_end_estimate`` is when the robot is expected to finish every
        action dispatched so far for this request (minimum execution times),
        or None if nothing has been dispatched yet.
        """
        if gen.tokens_emitted_total >= gen.total_tokens:
            return None
        if dispatched or not prev.first:
            deadline = action_end_estimate
            ref = action_end_estimate
        else:
            deadline, ref = prev.deadline, None
        task = QueuedTask(
            request_id=gen.request_id,
            agent_id=gen.agent_id,
            segment_index=gen.segment_index,
            arrival_time=prev.arrival_time,
            deadline=deadline,
            tuf=prev.tuf,
            gen_estimate_s=prev.gen_estimate_s,
            initial_deadline=prev.initial_deadline,
            prev_action_end_estimate=ref,
            gen=gen,
        )
        self._push(task, now)
        return task

    # -- admission -------------------------------------------------------

    def admit_decision(self, engine: Engine, candidate: QueuedTask, now: float) -> bool:
        """Latency-guided admission for segmented policies.

        Refuse if the most urgent running generation could no longer finish
        its segment by its deadline once ``candidate`` joins, or if the
        candidate's KV cache cannot be placed on the GPU.
        """
        gen = candidate.gen
        if gen is not None and not engine.can_fit(gen):
            return False
        if not engine.running:
            return True
        g = self.protected_generation(engine, now)
        self._last_protected = None if g is None else (g.request_id, self.deadlines[g.request_id])
        if g is None:
            return True
        budget_ms = (self.deadlines[g.request_id] - now) * 1000.0
        lump = engine.first_iteration_cost_ms(gen) if gen is not None else 0.0
        est = wcet_ms(engine, g, len(engine.running) + 1, self.config.speed_window)
        return est + lump + self._pending_lumps(engine) <= budget_ms

    def _pending_lumps(self, engine: Engine) -> float:
        pending = sum(engine.first_iteration_cost_ms(x) for x in engine.running if not x.prefilled)
        return pending + engine.pending_restore_ms

    def protected_generation(self, engine: Engine, now: float) -> GenerationState | None:
        """Running generation whose deadline admission must respect.

        The earliest-deadline running generation, skipping those whose
        deadline has already passed: a new admission cannot make them late.
        """
        live = [g for g in engine.running
                if self.deadlines.get(g.request_id, float("inf")) > now]
        if not live:
            return None
        return min(live, key=lambda x: (self.deadlines.get(x.request_id, float("inf")), x.request_id))

    def _fits_cap(self, engine: Engine, candidate: QueuedTask) -> bool:
        cap = self.config.batch_cap
        if cap is not None and len(engine.running) >= cap:
            return False
        return candidate.gen is None or engine.can_fit(candidate.gen)

    def next_wakeup(self, now: float) -> float | None:
        """Time at which an idle engine should re-run admission, if any."""
        return None

    def select_policy_step(
        self, engine: Engine, now: float
    ) -> tuple[list[tuple[QueuedTask, float]], bool]:
        """Pop every task the policy admits at ``now``.

        Returns ``(task, restore_ms)`` pairs in admission order and whether a
        queued task was refused.
        """
        admitted: list[tuple[QueuedTask, float]] = []
        while len(self.queue):
            self.queue.update_all_priorities(now)
            head = self.queue.peek()
            self._last_protected = None
            if self.config.adaptive:
                ok = self.admit_decision(engine, head, now)
            else:
                ok = self._fits_cap(engine, head)
            if not ok:
                self.refusals += 1
                return admitted, True
            self.queue.pop()
            self._queued.discard(head.request_id)
            self.deadlines[head.request_id] = head.deadline
            if self._last_protected is not None:
                self.admission_notes[head.request_id] = self._last_protected
            admitted.append((head, engine.admit(head.gen, now)))
        return admitted, False
