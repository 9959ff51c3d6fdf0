"""Exhaustive schedule search on tiny single-server instances.

Time is discretised into ticks. Each request is a chain of segments with an
integer generation time and an integer robot execution time. A schedule
fixes the tick at which every segment's generation starts on the single
server; segments never overlap, a request's segments are generated in order,
and everything must finish generating by the horizon. Robot timing follows
the serving model: an action starts when its segment is generated and the
robot is free, and waiting is the gap before each action.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .engine import EngineCostModel
from .scheduler import Policy, Scheduler, SchedulerConfig, TaskQueue
from .simcore import SimConfig, SimResult, Simulation
from .tuf import (TimeUtilityFunction, Urgency, UrgencyClass, eval_tuf, eval_tuf_array,
                  eval_tuf_suspended, eval_tuf_suspended_array)
from .workload import (ArrivalEvent, Constant, ExecutionTimeModel, SkillCall, TaskTrace,
                       TraceCategory, TraceLibrary)

MAX_REQUESTS = 3
MAX_SEGMENTS = 3
MAX_HORIZON = 64
DEFAULT_MAX_SCHEDULES = 2_000_000


class InstanceTooLarge(ValueError):
    pass


class InfeasibleSchedule(ValueError):
    pass


@dataclass(frozen=True)
class TinySegment:
    gen_ticks: int
    exec_ticks: int

    def __post_init__(self):
        if self.gen_ticks < 1 or self.exec_ticks < 0:
            raise ValueError("gen_ticks must be >= 1 and exec_ticks >= 0")


@dataclass(frozen=True)
class TinyRequest:
    arrival_tick: int
    segments: tuple[TinySegment, ...]
    tuf: TimeUtilityFunction


@dataclass(frozen=True)
class TinyInstance:
    requests: tuple[TinyRequest, ...]
    horizon: int
    tick_s: float = 0.01
    allow_idle: bool = True

    def check_bounds(self) -> None:
        if len(self.requests) > MAX_REQUESTS:
            raise InstanceTooLarge(f"{len(self.requests)} requests (max {MAX_REQUESTS})")
        for r in self.requests:
            if not 1 <= len(r.segments) <= MAX_SEGMENTS:
                raise InstanceTooLarge(f"{len(r.segments)} segments (1..{MAX_SEGMENTS})")
        if self.horizon > MAX_HORIZON:
            raise InstanceTooLarge(f"horizon {self.horizon} ticks (max {MAX_HORIZON})")

    @property
    def monotone(self) -> bool:
        return all(r.tuf.is_monotone for r in self.requests)

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "tick_s": self.tick_s,
            "allow_idle": self.allow_idle,
            "requests": [
                {
                    "arrival_tick": r.arrival_tick,
                    "segments": [[s.gen_ticks, s.exec_ticks] for s in r.segments],
                    "tuf": r.tuf.to_dict(),
                }
                for r in self.requests
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TinyInstance":
        reqs = []
        for r in d["requests"]:
            t = r["tuf"]
            # increasing curves are legal fixtures here; the report flags them
            tuf = TimeUtilityFunction.unchecked(t["beta"], t["alpha"], t["ert_s"])
            segs = tuple(TinySegment(int(g), int(e)) for g, e in r["segments"])
            reqs.append(TinyRequest(int(r["arrival_tick"]), segs, tuf))
        return cls(tuple(reqs), int(d["horizon"]), float(d.get("tick_s", 0.01)),
                   bool(d.get("allow_idle", True)))


def load_instances(path: str | Path) -> list[TinyInstance]:
    """Read a JSON list of instances (or a single instance object)."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [TinyInstance.from_dict(d) for d in data]


# A schedule: per request, the generation start tick of each segment.
Schedule = tuple[tuple[int, ...], ...]


def _plan(inst: TinyInstance):
    return tuple((r.arrival_tick, tuple(s.gen_ticks for s in r.segments)) for r in inst.requests)


def count_schedules(inst: TinyInstance) -> int:
    """Number of feasible schedules, by dynamic programming over (time, progress)."""
    plan = _plan(inst)
    H = inst.horizon

    @lru_cache(maxsize=None)
    def rec(t: int, idx: tuple[int, ...]) -> int:
        if all(k == len(p[1]) for k, p in zip(idx, plan)):
            return 1
        remaining = sum(sum(p[1][k:]) for k, p in zip(idx, plan))
        earliest = min(max(t, arr) for k, (arr, gens) in zip(idx, plan) if k < len(gens))
        total = 0
        for i, (arr, gens) in enumerate(plan):
            k = idx[i]
            if k == len(gens):
                continue
            lo = max(t, arr)
            if inst.allow_idle:
                hi = H - remaining
            elif lo > earliest:
                continue
            else:
                hi = min(lo, H - remaining)
            nxt = idx[:i] + (k + 1,) + idx[i + 1:]
            for s in range(lo, hi + 1):
                total += rec(s + gens[k], nxt)
        return total

    return rec(0, tuple(0 for _ in plan))


def schedule_matrix(inst: TinyInstance, max_schedules: int = DEFAULT_MAX_SCHEDULES) -> np.ndarray:
    """All feasible schedules as rows of generation start ticks.

    Columns run over requests in order and, within a request, over its
    segments. Built breadth first: each step places one more segment on the
    server after everything placed so far, and start ticks are capped so the
    remaining generation work still fits in the horizon.
    """
    inst.check_bounds()
    n_total = count_schedules(inst)
    if n_total > max_schedules:
        raise InstanceTooLarge(f"{n_total} schedules exceeds limit {max_schedules}")
    plan = _plan(inst)
    n = len(plan)
    offsets = np.cumsum([0] + [len(g) for _, g in plan])
    M = int(offsets[-1])
    H = inst.horizon
    starts = np.full((1, M), -1, dtype=np.int64)
    t = np.zeros(1, dtype=np.int64)
    idx = np.zeros((1, n), dtype=np.int64)
    # suffix sums of generation ticks per request: rem[i][k] = sum(gens[k:])
    rem = [np.concatenate([np.cumsum(g[::-1])[::-1], [0]]).astype(np.int64) for _, g in plan]
    big = np.iinfo(np.int64).max
    for _ in range(M):
        remaining = sum(rem[i][idx[:, i]] for i in range(n))
        # earliest tick at which some unplaced segment is ready
        earliest = np.full(len(t), big)
        for i, (arr, gens) in enumerate(plan):
            open_ = idx[:, i] < len(gens)
            earliest = np.where(open_, np.minimum(earliest, np.maximum(t, arr)), earliest)
        parts = []
        for i, (arr, gens) in enumerate(plan):
            for k in range(len(gens)):
                sel = np.flatnonzero(idx[:, i] == k)
                if sel.size == 0:
                    continue
                lo = np.maximum(t[sel], arr)
                hi = H - remaining[sel]
                if not inst.allow_idle:
                    # the server may not wait while another segment is ready
                    hi = np.where(lo > earliest[sel], lo - 1, np.minimum(lo, hi))
                cnt = np.maximum(hi - lo + 1, 0)
                rep = np.repeat(sel, cnt)
                if rep.size == 0:
                    continue
                # start tick = lo + position within each repeated block
                first = np.repeat(np.cumsum(cnt) - cnt, cnt)
                s_new = np.repeat(lo, cnt) + (np.arange(rep.size) - first)
                st = starts[rep].copy()
                st[:, offsets[i] + k] = s_new
                ix = idx[rep].copy()
                ix[:, i] += 1
                parts.append((st, s_new + gens[k], ix))
        if not parts:
            return np.zeros((0, M), dtype=np.int64)
        starts = np.concatenate([p[0] for p in parts])
        t = np.concatenate([p[1] for p in parts])
        idx = np.concatenate([p[2] for p in parts])
    order = np.lexsort(starts.T[::-1]) if M else np.arange(len(starts))
    return starts[order]


def _rows_to_schedules(inst: TinyInstance, rows: np.ndarray) -> list[Schedule]:
    sizes = [len(r.segments) for r in inst.requests]
    out = []
    for row in rows.tolist():
        sched, c = [], 0
        for k in sizes:
            sched.append(tuple(row[c:c + k]))
            c += k
        out.append(tuple(sched))
    return out


def enumerate_schedules(inst: TinyInstance, max_schedules: int = DEFAULT_MAX_SCHEDULES) -> list[Schedule]:
    """All feasible schedules, sorted.

    With ``allow_idle`` false, the server never idles while some segment is
    ready: each decision starts at the earliest tick at which any unplaced
    segment is ready, and only segments ready then may be chosen.
    """
    return _rows_to_schedules(inst, schedule_matrix(inst, max_schedules))


@dataclass(frozen=True)
class ScheduleOutcome:
    objective: float
    completion: tuple[float, ...]  # seconds, per request
    first_utility: tuple[float, ...]
    waits: tuple[tuple[float, ...], ...]


def check_feasible(inst: TinyInstance, sched: Schedule) -> None:
    if len(sched) != len(inst.requests):
        raise InfeasibleSchedule("one start list per request required")
    busy = []
    for r, starts in zip(inst.requests, sched):
        if len(starts) != len(r.segments):
            raise InfeasibleSchedule("one start per segment required")
        prev_end = r.arrival_tick
        for s, seg in zip(starts, r.segments):
            if s < prev_end:
                raise InfeasibleSchedule(f"segment starts at {s} before it is ready ({prev_end})")
            if s + seg.gen_ticks > inst.horizon:
                raise InfeasibleSchedule("generation runs past the horizon")
            busy.append((s, s + seg.gen_ticks))
            prev_end = s + seg.gen_ticks
    busy.sort()
    for (a0, a1), (b0, _) in zip(busy, busy[1:]):
        if b0 < a1:
            raise InfeasibleSchedule(f"generations overlap at tick {b0}")


def evaluate_schedule(inst: TinyInstance, sched: Schedule, check: bool = True) -> ScheduleOutcome:
    if check:
        check_feasible(inst, sched)
    tick = inst.tick_s
    total = 0.0
    comps, firsts, waits = [], [], []
    for r, starts in zip(inst.requests, sched):
        ws = []
        prev_end = None
        for k, (s, seg) in enumerate(zip(starts, r.segments)):
            ready = s + seg.gen_ticks
            if k == 0:
                act = ready
                w = (act - r.arrival_tick) * tick
                u = eval_tuf(r.tuf, w)
                firsts.append(u)
            else:
                act = max(ready, prev_end)
                w = (act - prev_end) * tick
                u = eval_tuf_suspended(r.tuf, w)
            total += u
            ws.append(w)
            prev_end = act + seg.exec_ticks
        comps.append((prev_end - r.arrival_tick) * tick)
        waits.append(tuple(ws))
    return ScheduleOutcome(total, tuple(comps), tuple(firsts), tuple(waits))


def objective_eq3(inst: TinyInstance, sched: Schedule) -> float:
    """First-segment utility plus follow-up segment utilities, summed over requests."""
    return evaluate_schedule(inst, sched).objective


@dataclass
class ParetoReport:
    n_schedules: int
    best_objective: float
    maximizers: list[Schedule]
    # (maximizer, dominating schedule) pairs, capped at a few examples
    dominated_pairs: list[tuple[Schedule, Schedule]] = field(default_factory=list)
    n_dominated_maximizers: int = 0
    assumption_violated: bool = False

    @property
    def any_maximizer_dominated(self) -> bool:
        return self.n_dominated_maximizers > 0

    @property
    def no_pareto_optimal_maximizer(self) -> bool:
        return self.n_dominated_maximizers == len(self.maximizers)

    @property
    def counterexample(self) -> bool:
        """Every objective maximizer is dominated by some feasible schedule."""
        return self.no_pareto_optimal_maximizer

    def summary(self) -> dict:
        return {
            "schedules": self.n_schedules,
            "best_objective": self.best_objective,
            "maximizers": len(self.maximizers),
            "dominated_maximizers": self.n_dominated_maximizers,
            "counterexample": self.counterexample,
            "assumption_violated": self.assumption_violated,
        }


def evaluate_matrix(inst: TinyInstance, starts: np.ndarray):
    """Vectorised evaluation of many schedules.

    ``starts`` has one row per schedule and one column per segment, requests
    in order and segments in order within each request. Returns the
    objective per schedule, completion ticks (schedules x requests) and
    first-segment waiting ticks (schedules x requests).
    """
    S = starts.shape[0]
    n = len(inst.requests)
    obj = np.zeros(S)
    comp = np.zeros((S, n), dtype=np.int64)
    w0 = np.zeros((S, n), dtype=np.int64)
    col = 0
    for i, r in enumerate(inst.requests):
        prev_end = None
        for k, seg in enumerate(r.segments):
            ready = starts[:, col] + seg.gen_ticks
            col += 1
            if k == 0:
                act = ready
                w0[:, i] = act - r.arrival_tick
                obj += eval_tuf_array(r.tuf, w0[:, i] * inst.tick_s)
            else:
                act = np.maximum(ready, prev_end)
                obj += eval_tuf_suspended_array(r.tuf, (act - prev_end) * inst.tick_s)
            prev_end = act + seg.exec_ticks
        comp[:, i] = prev_end - r.arrival_tick
    return obj, comp, w0


def pareto_check(inst: TinyInstance, tol: float = 1e-9, max_examples: int = 3,
                 max_schedules: int = DEFAULT_MAX_SCHEDULES) -> ParetoReport:
    """Test whether objective maximizers are Pareto optimal.

    The criteria are each request's completion time (lower is better) and
    each request's first-segment utility (higher is better). A schedule
    dominates another if it is no worse on every criterion and strictly
    better on at least one.
    """
    starts = schedule_matrix(inst, max_schedules)
    if not inst.requests:
        return ParetoReport(1, 0.0, [()], assumption_violated=False)
    obj, comp, w0 = evaluate_matrix(inst, starts)
    best = float(obj.max())
    is_max = obj >= best - tol
    # schedules sharing completion and first-wait ticks are indistinguishable here
    keys, first_idx, inverse = np.unique(np.hstack([comp, w0]), axis=0,
                                         return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    n = len(inst.requests)
    C = keys[:, :n]
    U = np.column_stack([eval_tuf_array(r.tuf, keys[:, n + i] * inst.tick_s)
                         for i, r in enumerate(inst.requests)])
    max_rows = np.flatnonzero(is_max)
    rep = ParetoReport(len(starts), best, _rows_to_schedules(inst, starts[max_rows]),
                       assumption_violated=not inst.monotone)
    dominated_by = {}
    for key in np.unique(inverse[is_max]):
        no_worse = np.all(C <= C[key], axis=1) & np.all(U >= U[key] - tol, axis=1)
        better = np.any(C < C[key], axis=1) | np.any(U > U[key] + tol, axis=1)
        dom = np.flatnonzero(no_worse & better)
        if dom.size:
            dominated_by[int(key)] = int(first_idx[dom[0]])
    for i in np.flatnonzero(is_max):
        d = dominated_by.get(int(inverse[i]))
        if d is not None:
            rep.n_dominated_maximizers += 1
            if len(rep.dominated_pairs) < max_examples:
                pair = _rows_to_schedules(inst, starts[[i, d]])
                rep.dominated_pairs.append((pair[0], pair[1]))
    return rep


# -- random instances ----------------------------------------------------------

def random_instance(rng: np.random.Generator, tick_s: float = 0.01, plateau: bool = True) -> TinyInstance:
    """Draw a small valid instance.

    TUFs keep the preset shapes (beta 1 or 2, utility reaching zero half a
    plateau-length or so after the deadline) but are rescaled so the deadline
    falls inside the horizon. ``plateau=False`` sets ERT to zero, making the
    first-segment curve strictly decreasing.
    """
    n = int(rng.integers(1, MAX_REQUESTS + 1))
    reqs = []
    for _ in range(n):
        k = int(rng.integers(1, MAX_SEGMENTS + 1))
        segs = tuple(TinySegment(int(rng.integers(1, 4)), int(rng.integers(0, 7))) for _ in range(k))
        if rng.random() < 0.5:
            beta, ert_t, cut_t = 1.0, 10, 15
        else:
            beta, ert_t, cut_t = 2.0, 2, 5
        if not plateau:
            ert_t, cut_t = 0, cut_t - ert_t
        alpha = -beta / ((cut_t - ert_t) * tick_s)
        reqs.append(TinyRequest(int(rng.integers(0, 3)), segs,
                                TimeUtilityFunction(beta, alpha, ert_t * tick_s)))
    total_gen = sum(s.gen_ticks for r in reqs for s in r.segments)
    horizon = total_gen + max(r.arrival_tick for r in reqs) + int(rng.integers(0, 3))
    return TinyInstance(tuple(reqs), min(horizon, MAX_HORIZON), tick_s)


def random_instances(seed: int, count: int, **kw) -> list[TinyInstance]:
    rng = np.random.default_rng(seed)
    return [random_instance(rng, **kw) for _ in range(count)]


# -- replay through the simulator ----------------------------------------------

def replay(inst: TinyInstance, sched: Schedule) -> SimResult:
    """Run ``sched`` through the discrete-event simulator.

    The engine is configured so that one token takes one tick at batch size
    one and every other overhead is zero. Each segment is a single skill
    whose token count equals its generation ticks and whose execution time
    is constant. Returns the simulation result, whose event log can be fed
    to :mod:`segserve.metrics`.
    """
    check_feasible(inst, sched)
    tick_ms = inst.tick_s * 1000.0
    profiles, traces, arrivals = {}, {}, []
    for r_idx, r in enumerate(inst.requests):
        plan = []
        for k, seg in enumerate(r.segments):
            name = f"s{r_idx}_{k}"
            profiles[name] = Constant(seg.exec_ticks * inst.tick_s)
            text = f"{name}({'0' * seg.gen_ticks});"
            plan.append(SkillCall(name, (), seg.gen_ticks, text))
        trace_id = r_idx + 1
        traces[trace_id] = TaskTrace(trace_id, TraceCategory.DRONE_NORMAL, 1, tuple(plan),
                                     UrgencyClass(Urgency.NORMAL, r.tuf), f"tiny request {r_idx}")
        arrivals.append(ArrivalEvent(r.arrival_tick * inst.tick_s, r_idx, trace_id, r_idx))
    lib = TraceLibrary(traces, ExecutionTimeModel(profiles))
    engine = EngineCostModel(
        decode_ms_per_token=tick_ms, prefill_ms_per_prompt_token=0.0, batch_slowdown_gamma=0.0,
        kv_mb_per_request=1.0, gpu_memory_mb=1024.0, swap_restore_ms=0.0, reprefill_ms=1.0,
        detok_ms_per_token=0.0, network_latency_ms=0.0, stop_check_ms_per_token=0.0,
        context_save_ms=0.0,
    )
    # simulator request ids follow arrival order
    order = sorted(range(len(inst.requests)), key=lambda i: (inst.requests[i].arrival_tick, i))
    rid_of = {r_idx: rid for rid, r_idx in enumerate(order)}
    plan_order = sorted(
        (s * inst.tick_s, rid_of[r_idx], k)
        for r_idx, starts in enumerate(sched) for k, s in enumerate(starts)
    )
    cfg = SimConfig(
        library=lib, engine=engine,
        scheduler=SchedulerConfig(policy=Policy.SEG_FCFS, max_batch_size=1,
                                  max_segment_tokens=MAX_HORIZON + 1),
        arrivals=arrivals, wall_cap_s=(inst.horizon + 1) * inst.tick_s
        + sum(s.exec_ticks for r in inst.requests for s in r.segments) * inst.tick_s + 1.0,
    )
    sim = Simulation(cfg, scheduler_factory=lambda c, net: ReplayScheduler(c, net, plan_order))
    return sim.run()


class ReplayScheduler(Scheduler):
    """Admits segments at prescribed times, one at a time."""

    def __init__(self, config: SchedulerConfig, network_latency_s: float, plan_order):
        super().__init__(config, network_latency_s)
        self.plan = list(plan_order)
        self.eps = 1e-9

    def next_wakeup(self, now: float) -> float | None:
        if self.plan and self.plan[0][0] > now + self.eps:
            return self.plan[0][0]
        return None

    def select_policy_step(self, engine, now):
        if engine.running or not self.plan:
            return [], False
        t, rid, k = self.plan[0]
        if t > now + self.eps:
            return [], False
        task = next((x for x in self.queue if x.request_id == rid), None)
        if task is None:
            # a simultaneous arrival not yet processed; its own event re-runs admission
            return [], False
        if task.segment_index != k:
            raise InfeasibleSchedule(f"segment {k} of request {rid} not ready at {now}")
        self.plan.pop(0)
        rest = [x for x in self.queue if x is not task]
        self.queue = TaskQueue(self.policy, self.network_latency_s)
        for x in rest:
            self.queue.push(x, now)
        self._queued.discard(rid)
        self.deadlines[rid] = task.deadline
        return [(task, engine.admit(task.gen, now))], False
