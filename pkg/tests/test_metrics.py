import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from segserve.metrics import (
    METRICS_HEADER,
    IncompleteRequest,
    aggregate,
    aggregate_log,
    audit_log,
    compute_request_metrics,
    metrics_csv,
    realized_first_utility,
    segmentation_overhead,
    summarize_log,
)
from segserve.scheduler import Policy, SchedulerConfig
from segserve.simcore import EventKind as K, EventLog, SimConfig, SimEvent, run
from segserve.tuf import NORMAL_TUF, URGENT_TUF, eval_tuf
from segserve.workload import (
    WID1,
    ArrivalEvent,
    ExecutionTimeModel,
    Sampled,
    SkillCall,
    TaskTrace,
    TraceCategory,
    TraceLibrary,
    builtin_library,
)
from segserve.tuf import UrgencyClass


def synthetic(rid, arrival, spans, tuf=NORMAL_TUF, trace_id=1, complete=True):
    evs = [SimEvent(arrival, K.ARRIVAL, rid, rid,
                    {"trace_id": trace_id, "urgency": "Urgent" if tuf is URGENT_TUF else "Normal",
                     "tuf": tuf.to_dict()})]
    for k, (s, e) in enumerate(spans):
        evs.append(SimEvent(s, K.ACTION_START, rid, rid, {"k": k}))
        evs.append(SimEvent(e, K.ACTION_END, rid, rid, {"k": k}))
    if complete:
        evs.append(SimEvent(spans[-1][1], K.REQUEST_COMPLETE, rid, rid, {"text": ""}))
    return evs


def test_latency_definitions():
    log = EventLog(synthetic(0, 0.0, [(0.5, 2.5)]))
    m = compute_request_metrics(log, 0)
    assert (m.response_time_s, m.waiting_time_s, m.completion_time_s) == (0.5, 0.5, 2.5)
    assert m.realized_utility == 1.0


def test_zero_gap_waiting_equals_response():
    m = compute_request_metrics(EventLog(synthetic(0, 0.0, [(0.3, 1.0), (1.0, 2.0)])), 0)
    assert m.waiting_time_s == m.response_time_s == 0.3
    assert m.chained_utility == 2.0


def test_cutoff_utility():
    m = compute_request_metrics(EventLog(synthetic(0, 0.0, [(1.5, 2.0)])), 0)
    assert m.realized_utility == pytest.approx(0.0)


def test_incomplete_requests_are_dropped():
    log = EventLog(synthetic(0, 0.0, [(0.2, 1.0)]) + synthetic(1, 0.0, [(0.2, 1.0)], complete=False))
    with pytest.raises(IncompleteRequest):
        compute_request_metrics(log, 1)
    tab = aggregate_log(log)
    assert tab.n == 1 and tab.dropped == 1 and tab.row(1).dropped == 1


def test_singleton_means_and_zero_variance():
    evs = []
    for rid, (tid, tuf, w) in enumerate([(1, NORMAL_TUF, 1.2), (6, URGENT_TUF, 0.3)]):
        evs += synthetic(rid, 0.0, [(w, w + 1)], tuf, tid)
    tab = aggregate_log(EventLog(evs))
    assert tab.row(1).mean_utility == pytest.approx(eval_tuf(NORMAL_TUF, 1.2))
    assert tab.row(6).mean_utility == pytest.approx(eval_tuf(URGENT_TUF, 0.3))
    same = sum((synthetic(r, r * 10.0, [(r * 10.0 + 0.4, r * 10.0 + 1)]) for r in range(4)), [])
    tab = aggregate_log(EventLog(same))
    assert tab.row(1).std_utility == 0.0 and tab.row(1).n == 4
    with pytest.raises(ValueError):
        aggregate([])


def test_metrics_csv_rows():
    tab = aggregate_log(run(SimConfig(workload=WID1.with_seed(0))).log)
    text = metrics_csv([("SegPUD", "WID1", tab)])
    lines = text.strip().split("\n")
    assert lines[0].split(",") == list(METRICS_HEADER)
    assert [l.split(",")[2] for l in lines[1:]] == [str(i) for i in range(1, 9)]


@pytest.fixture(scope="module")
def wid1_run():
    return run(SimConfig(workload=WID1.with_seed(2), seed=2))


def test_audit_clean_and_first_segment_sum(wid1_run):
    log = wid1_run.log
    assert audit_log(log, builtin_library()) == []
    s = summarize_log(log)
    direct = sum(eval_tuf(m.tuf, m.response_time_s) for m in s.completed)
    assert realized_first_utility(s.completed) == pytest.approx(direct)
    for m in s.completed:
        assert sum(m.waits) + sum(m.execs) == pytest.approx(m.completion_time_s)
        assert m.response_time_s <= m.waiting_time_s + 1e-12
        assert m.realized_utility <= m.tuf.beta


def test_audit_catches_tampering(wid1_run):
    evs = list(wid1_run.log)
    i = next(i for i, e in enumerate(evs) if "free_mb" in e.payload)
    bad = dict(evs[i].payload, free_mb=evs[i].payload["free_mb"] + 5)
    evs[i] = dataclasses.replace(evs[i], payload=bad)
    j = next(i for i, e in enumerate(evs) if e.kind is K.SEGMENT_DISPATCHED)
    evs[j] = dataclasses.replace(evs[j], payload=dict(evs[j].payload, text="x"))
    problems = audit_log(EventLog(evs, {"policy": "SegPUD"}))
    assert any("memory" in p for p in problems)
    assert any("reassemble" in p for p in problems)


def test_audit_fcfs_order():
    lib = builtin_library()
    arr = [ArrivalEvent(0.1 * i, i, 1 + i % 8, i) for i in range(6)]
    log = run(SimConfig(library=lib, arrivals=arr,
                        scheduler=SchedulerConfig(Policy.FCFS_BATCH, max_batch_size=2))).log
    assert audit_log(log, lib) == []
    evs = list(log)
    admits = [i for i, e in enumerate(evs) if e.kind is K.ADMIT]
    a, b = admits[0], admits[-1]
    evs[a], evs[b] = (dataclasses.replace(evs[a], request_id=evs[b].request_id),
                      dataclasses.replace(evs[b], request_id=evs[a].request_id))
    assert any("FCFS" in p for p in audit_log(EventLog(evs, log.meta)))


@pytest.mark.parametrize("tid", range(1, 9))
def test_segmentation_overhead_bounded(tid):
    assert 0 <= segmentation_overhead(tid) <= 0.06


def _sampled_lib():
    t = TaskTrace(1, TraceCategory.DRONE_NORMAL, 8, (SkillCall("g", (1,), 4),), UrgencyClass.normal())
    return TraceLibrary({1: t}, ExecutionTimeModel({"g": Sampled((0.5, 2.0, 7.5))}))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_waiting_invariant_to_exec_resampling(s1, s2):
    lib = _sampled_lib()
    arr = [ArrivalEvent(0.0, 0, 1, 0), ArrivalEvent(0.01, 1, 1, 1)]
    out = []
    for seed in (s1, s2):
        log = run(SimConfig(library=lib, arrivals=arr, seed=seed)).log
        out.append([compute_request_metrics(log, r).waiting_time_s for r in (0, 1)])
    assert out[0] == out[1]
