"""Per-request latencies, realized utility and aggregate tables from an event log.

Everything here reads the log only; no scheduler state is consulted. TUF
evaluation goes through :mod:`segserve.tuf`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .simcore import EventKind, EventLog, SimEvent
from .tuf import TimeUtilityFunction, Urgency, eval_tuf, eval_tuf_suspended


class IncompleteRequest(LookupError):
    pass


@dataclass(frozen=True)
class RequestMetrics:
    request_id: int
    task_type: str
    urgency: str
    arrival_s: float
    response_time_s: float
    waiting_time_s: float
    completion_time_s: float
    realized_utility: float
    chained_utility: float
    waits: tuple[float, ...]
    execs: tuple[float, ...]
    tuf: TimeUtilityFunction = field(repr=False, compare=False, default=None)


def _index(log: EventLog) -> dict[int, list[SimEvent]]:
    by_req: dict[int, list[SimEvent]] = {}
    for e in log:
        if e.request_id >= 0:
            by_req.setdefault(e.request_id, []).append(e)
    return by_req


def _from_events(rid: int, evs: list[SimEvent]) -> RequestMetrics:
    arrival = next((e for e in evs if e.kind is EventKind.ARRIVAL), None)
    if arrival is None or not any(e.kind is EventKind.REQUEST_COMPLETE for e in evs):
        raise IncompleteRequest(f"request {rid} did not complete")
    starts = {e.payload["k"]: e.time for e in evs if e.kind is EventKind.ACTION_START}
    ends = {e.payload["k"]: e.time for e in evs if e.kind is EventKind.ACTION_END}
    ks = sorted(starts)
    if ks != list(range(len(ks))) or sorted(ends) != ks:
        raise IncompleteRequest(f"request {rid} has unmatched action events")
    tuf = TimeUtilityFunction.from_dict(arrival.payload["tuf"])
    waits, execs = [], []
    prev_end = arrival.time
    for k in ks:
        w = starts[k] - prev_end
        waits.append(w if k == 0 else max(0.0, w))
        execs.append(ends[k] - starts[k])
        prev_end = ends[k]
    chained = eval_tuf(tuf, waits[0]) + sum(eval_tuf_suspended(tuf, w) for w in waits[1:])
    return RequestMetrics(
        request_id=rid,
        task_type=str(arrival.payload["trace_id"]),
        urgency=arrival.payload.get("urgency", Urgency.NORMAL.value),
        arrival_s=arrival.time,
        response_time_s=waits[0],
        waiting_time_s=float(sum(waits)),
        completion_time_s=ends[ks[-1]] - arrival.time,
        realized_utility=eval_tuf(tuf, waits[0]),
        chained_utility=chained,
        waits=tuple(waits),
        execs=tuple(execs),
        tuf=tuf,
    )


def compute_request_metrics(log: EventLog, request_id: int) -> RequestMetrics:
    evs = [e for e in log if e.request_id == request_id]
    return _from_events(request_id, evs)


@dataclass
class LogSummary:
    completed: list[RequestMetrics]
    incomplete: dict[int, str]  # request_id -> task_type


def summarize_log(log: EventLog) -> LogSummary:
    done, missing = [], {}
    for rid, evs in sorted(_index(log).items()):
        try:
            done.append(_from_events(rid, evs))
        except IncompleteRequest:
            arr = next((e for e in evs if e.kind is EventKind.ARRIVAL), None)
            missing[rid] = str(arr.payload["trace_id"]) if arr else "?"
    return LogSummary(done, missing)


def realized_first_utility(metrics: Iterable[RequestMetrics]) -> float:
    """Sum of first-segment utilities."""
    return float(sum(m.realized_utility for m in metrics))


def realized_chained_utility(metrics: Iterable[RequestMetrics]) -> float:
    """Sum over requests of first-segment plus follow-up segment utilities."""
    return float(sum(m.chained_utility for m in metrics))


@dataclass(frozen=True)
class GroupStats:
    task_type: str
    n: int
    mean_utility: float
    std_utility: float
    mean_response_s: float
    mean_waiting_s: float
    dropped: int


@dataclass
class AggregateTable:
    rows: list[GroupStats]
    total_utility: float
    total_chained: float
    mean_utility: float
    by_urgency: dict[str, float]
    n: int
    dropped: int

    def row(self, task_type) -> GroupStats:
        for r in self.rows:
            if r.task_type == str(task_type):
                return r
        raise KeyError(task_type)


def _type_key(t: str):
    return (0, int(t), "") if t.isdigit() else (1, 0, t)


def aggregate(metrics: list[RequestMetrics], incomplete: dict[int, str] | None = None) -> AggregateTable:
    """Per-task-type means plus overall totals."""
    incomplete = incomplete or {}
    if not metrics and not incomplete:
        raise ValueError("nothing to aggregate")
    types = sorted({m.task_type for m in metrics} | set(incomplete.values()), key=_type_key)
    rows = []
    for t in types:
        ms = [m for m in metrics if m.task_type == t]
        u = np.array([m.realized_utility for m in ms], dtype=float)
        nan = float("nan")
        rows.append(GroupStats(
            task_type=t,
            n=len(ms),
            mean_utility=float(u.mean()) if ms else nan,
            std_utility=float(u.std()) if ms else nan,
            mean_response_s=float(np.mean([m.response_time_s for m in ms])) if ms else nan,
            mean_waiting_s=float(np.mean([m.waiting_time_s for m in ms])) if ms else nan,
            dropped=sum(1 for v in incomplete.values() if v == t),
        ))
    by_urg = {}
    for urg in (Urgency.NORMAL.value, Urgency.URGENT.value):
        us = [m.realized_utility for m in metrics if m.urgency == urg]
        if us:
            by_urg[urg] = float(np.mean(us))
    return AggregateTable(
        rows=rows,
        total_utility=realized_first_utility(metrics),
        total_chained=realized_chained_utility(metrics),
        mean_utility=float(np.mean([m.realized_utility for m in metrics])) if metrics else float("nan"),
        by_urgency=by_urg,
        n=len(metrics),
        dropped=len(incomplete),
    )


def aggregate_log(log: EventLog) -> AggregateTable:
    s = summarize_log(log)
    return aggregate(s.completed, s.incomplete)


METRICS_HEADER = ("policy", "wid", "task_type", "n", "mean_utility",
                  "mean_response_s", "mean_waiting_s", "dropped")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def metrics_csv(tables: Iterable[tuple[str, str, AggregateTable]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for policy, wid, tab in tables:
        for r in tab.rows:
            w.writerow([policy, wid, r.task_type, r.n, _fmt(r.mean_utility),
                        _fmt(r.mean_response_s), _fmt(r.mean_waiting_s), r.dropped])
    return buf.getvalue()


def write_metrics_csv(path: str | Path, tables) -> None:
    Path(path).write_text(metrics_csv(tables))


# -- log auditing ------------------------------------------------------------

def audit_log(log: EventLog, library=None, policy: str | None = None, tol: float = 1e-6) -> list[str]:
    """Check structural invariants of an event log; returns violation messages.

    Checks GPU memory conservation, the completion-time decomposition,
    token fidelity across suspensions, at most one active segment per
    request, admission safety, and arrival-order admission under FCFS
    policies.
    """
    problems: list[str] = []
    policy = policy or log.meta.get("policy")
    for e in log:
        if "free_mb" in e.payload:
            free, res, cap = e.payload["free_mb"], e.payload["resident_mb"], e.payload["capacity_mb"]
            if free < -tol or abs(free + res - cap) > tol:
                problems.append(f"memory at t={e.time}: free={free} resident={res} cap={cap}")

    for rid, evs in sorted(_index(log).items()):
        active = False
        last_snap = -1
        dispatched_text = []
        complete = None
        for e in evs:
            if e.kind in (EventKind.ADMIT, EventKind.RESUME):
                if active:
                    problems.append(f"request {rid}: two active segments at t={e.time}")
                active = True
            elif e.kind is EventKind.SUSPEND:
                if not active:
                    problems.append(f"request {rid}: suspend while inactive at t={e.time}")
                active = False
                n = e.payload["snapshot_tokens"]
                if n <= last_snap:
                    problems.append(f"request {rid}: token snapshot shrank to {n}")
                last_snap = n
            elif e.kind is EventKind.SEGMENT_DISPATCHED:
                dispatched_text.append(e.payload["text"])
            elif e.kind is EventKind.REQUEST_COMPLETE:
                complete = e
        if complete is None:
            continue
        text = complete.payload["text"]
        if "".join(dispatched_text) != text:
            problems.append(f"request {rid}: dispatched segments do not reassemble the output")
        if library is not None:
            arr = next(e for e in evs if e.kind is EventKind.ARRIVAL)
            if library[arr.payload["trace_id"]].text != text:
                problems.append(f"request {rid}: output differs from the scripted trace")
        try:
            m = _from_events(rid, evs)
        except IncompleteRequest as exc:
            problems.append(str(exc))
            continue
        if abs(sum(m.waits) + sum(m.execs) - m.completion_time_s) > tol:
            problems.append(f"request {rid}: C != sum(W + E)")
        if any(w < -tol for w in m.waits):
            problems.append(f"request {rid}: negative waiting")

    # admission safety: the generation protected by an admission closes its
    # segment by that generation's deadline
    closes: dict[int, list[float]] = {}
    for e in log:
        if e.kind is EventKind.SUSPEND or (
                e.kind is EventKind.SEGMENT_DISPATCHED and e.payload.get("reason") == "end"):
            closes.setdefault(e.request_id, []).append(e.time)
    for e in log:
        if e.kind in (EventKind.ADMIT, EventKind.RESUME) and "protected" in e.payload:
            g, d = e.payload["protected"], e.payload["protected_deadline"]
            later = [t for t in closes.get(g, []) if t >= e.time]
            if later and min(later) > d + tol:
                problems.append(f"admission at t={e.time} let request {g} overrun its deadline")

    if policy in ("SegFCFS", "FCFSBatch", "StreamFCFS"):
        firsts = [e.request_id for e in log if e.kind is EventKind.ADMIT]
        if firsts != sorted(firsts):
            problems.append("first admissions out of arrival order under FCFS")
    return problems


def segmentation_overhead(trace_id: int, library=None, engine=None) -> float:
    """Extra engine time of segmented over plain generation, as a fraction.

    The trace is served alone twice: once with segment suspension and stop
    checking, once as a single uninterrupted generation. The result is
    ``(segmented - plain) / segmented`` engine busy time.
    """
    from .engine import EngineCostModel
    from .scheduler import Policy, SchedulerConfig
    from .simcore import SimConfig, run
    from .workload import ArrivalEvent, builtin_library

    library = library or builtin_library()
    engine = engine or EngineCostModel()
    arrivals = [ArrivalEvent(0.0, 0, trace_id, 0)]
    busy = {}
    for policy in (Policy.SEG_PUD, Policy.FCFS_BATCH):
        res = run(SimConfig(library=library, engine=engine,
                            scheduler=SchedulerConfig(policy=policy), arrivals=arrivals))
        busy[policy] = res.engine_busy_ms
    seg = busy[Policy.SEG_PUD]
    return (seg - busy[Policy.FCFS_BATCH]) / seg
