import itertools
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from segserve.metrics import summarize_log, realized_chained_utility
from segserve.oracle import (
    InfeasibleSchedule,
    InstanceTooLarge,
    TinyInstance,
    TinyRequest,
    TinySegment,
    count_schedules,
    enumerate_schedules,
    evaluate_matrix,
    evaluate_schedule,
    load_instances,
    objective_eq3,
    pareto_check,
    random_instance,
    random_instances,
    replay,
    schedule_matrix,
)
from segserve.tuf import TimeUtilityFunction

F = TimeUtilityFunction(1.0, -20.0, 0.05)


def req(arrival=0, segs=((1, 0),), tuf=F):
    return TinyRequest(arrival, tuple(TinySegment(g, e) for g, e in segs), tuf)


def _idle_free(inst, sched):
    segs = sorted((s, i, k) for i, starts in enumerate(sched) for k, s in enumerate(starts))
    t = 0
    placed = [0] * len(inst.requests)
    for s, i, k in segs:
        ready = [max(t, r.arrival_tick) for j, r in enumerate(inst.requests)
                 if placed[j] < len(r.segments)]
        if s != min(ready):
            return False
        placed[i] += 1
        t = s + inst.requests[i].segments[k].gen_ticks
    return True


def brute_force(inst):
    """Independent enumeration: try every start tick for every segment."""
    cols = [(i, k, seg) for i, r in enumerate(inst.requests) for k, seg in enumerate(r.segments)]
    out = set()
    ranges = [range(inst.horizon) for _ in cols]
    for starts in itertools.product(*ranges):
        sched, c = [], 0
        for r in inst.requests:
            sched.append(tuple(starts[c:c + len(r.segments)]))
            c += len(r.segments)
        try:
            evaluate_schedule(inst, tuple(sched))
        except InfeasibleSchedule:
            continue
        if inst.allow_idle or _idle_free(inst, tuple(sched)):
            out.add(tuple(sched))
    return sorted(out)


def test_counting_examples():
    one = TinyInstance((req(),), horizon=3)
    assert enumerate_schedules(one) == [((0,),), ((1,),), ((2,),)]
    two = TinyInstance((req(), req()), horizon=2)
    assert len(enumerate_schedules(two)) == 2
    assert count_schedules(two) == 2
    empty = TinyInstance((), horizon=4)
    assert enumerate_schedules(empty) == [()] and count_schedules(empty) == 1


def test_no_idle_option():
    inst = TinyInstance((req(0, ((1, 0),)), req(2, ((1, 0),))), horizon=5, allow_idle=False)
    assert enumerate_schedules(inst) == [((0,), (2,))]
    both = TinyInstance((req(0, ((1, 0),)), req(0, ((2, 0),))), horizon=5, allow_idle=False)
    assert enumerate_schedules(both) == [((0,), (1,)), ((2,), (0,))]
    assert count_schedules(both) == 2


def test_objective_examples():
    served = TinyInstance((req(0, ((2, 0),)),), horizon=4)
    assert objective_eq3(served, ((0,),)) == F.beta
    chained = TinyInstance((req(0, ((2, 10), (1, 0))),), horizon=4)
    assert objective_eq3(chained, ((0, 2),)) == 2 * F.beta
    late = TinyInstance((req(0, ((1, 0),)),), horizon=30)
    # first action at tick 21 -> 0.21 s, 0.16 s past the deadline
    assert objective_eq3(late, ((20,),)) == pytest.approx(1.0 - 20.0 * 0.16)
    assert objective_eq3(late, ((20,),)) < 0


def test_infeasible_schedules():
    inst = TinyInstance((req(1, ((2, 0),)), req(0, ((2, 0),))), horizon=6)
    with pytest.raises(InfeasibleSchedule):
        evaluate_schedule(inst, ((0,), (2,)))
    with pytest.raises(InfeasibleSchedule):
        evaluate_schedule(inst, ((1,), (2,)))
    with pytest.raises(InfeasibleSchedule):
        evaluate_schedule(inst, ((5,), (0,)))


def test_bounds():
    with pytest.raises(InstanceTooLarge):
        schedule_matrix(TinyInstance(tuple(req() for _ in range(4)), horizon=4))
    with pytest.raises(InstanceTooLarge):
        schedule_matrix(TinyInstance((req(),), horizon=65))
    with pytest.raises(InstanceTooLarge):
        schedule_matrix(TinyInstance((req(0, ((1, 0),) * 4),), horizon=8))


def test_increasing_tuf_flagged():
    up = TimeUtilityFunction.unchecked(1.0, 5.0, 0.0)
    inst = TinyInstance((req(0, ((1, 0),), up), req(0, ((1, 0),))), horizon=6)
    rep = pareto_check(inst)
    assert rep.assumption_violated
    # utility rises with delay, so the maximizer waits and loses on completion time
    assert rep.any_maximizer_dominated


def test_pareto_report_on_simple_instance():
    inst = TinyInstance((req(0, ((2, 1),)), req(0, ((1, 3),))), horizon=5)
    rep = pareto_check(inst)
    assert not rep.assumption_violated and not rep.counterexample
    assert rep.summary()["maximizers"] == len(rep.maximizers)


def test_single_request_argmax_minimizes_completion():
    rng = np.random.default_rng(11)
    seen = 0
    while seen < 60:
        inst = random_instance(rng)
        if len(inst.requests) != 1:
            continue
        seen += 1
        S = schedule_matrix(inst)
        obj, comp, _ = evaluate_matrix(inst, S)
        argmax = set(np.flatnonzero(obj >= obj.max() - 1e-9))
        cmin = set(np.flatnonzero(comp[:, 0] == comp[:, 0].min()))
        assert argmax & cmin


def test_single_request_strict_curve_sets_coincide():
    rng = np.random.default_rng(12)
    seen = 0
    while seen < 60:
        inst = random_instance(rng, plateau=False)
        if len(inst.requests) != 1:
            continue
        seen += 1
        S = schedule_matrix(inst)
        obj, comp, _ = evaluate_matrix(inst, S)
        argmax = set(np.flatnonzero(obj >= obj.max() - 1e-9))
        assert argmax == set(np.flatnonzero(comp[:, 0] == comp[:, 0].min()))


def test_plateau_allows_a_longer_completion_at_equal_objective():
    # the first segment can be delayed within the plateau without losing utility
    f = TimeUtilityFunction(1.0, -20.0, 0.05)
    inst = TinyInstance((req(0, ((1, 0), (1, 0)), f),), horizon=6)
    S = schedule_matrix(inst)
    obj, comp, _ = evaluate_matrix(inst, S)
    best = obj >= obj.max() - 1e-9
    assert len(set(comp[best, 0])) > 1


def test_roundtrip_and_loading(tmp_path):
    insts = random_instances(3, 5)
    path = tmp_path / "inst.json"
    path.write_text(json.dumps([i.to_dict() for i in insts]))
    assert load_instances(path) == insts
    path.write_text(json.dumps(insts[0].to_dict()))
    assert load_instances(path) == insts[:1]


def test_random_instances_valid_and_seeded():
    a, b = random_instances(9, 30), random_instances(9, 30)
    assert a == b
    for inst in a:
        inst.check_bounds()
        assert inst.monotone


def test_replay_matches_objective():
    for inst in random_instances(21, 8):
        scheds = enumerate_schedules(inst)
        sched = scheds[len(scheds) // 2]
        res = replay(inst, sched)
        s = summarize_log(res.log)
        assert not s.incomplete
        assert realized_chained_utility(s.completed) == pytest.approx(objective_eq3(inst, sched), abs=1e-9)


small = st.lists(
    st.tuples(st.integers(0, 2),
              st.lists(st.tuples(st.integers(1, 2), st.integers(0, 3)), min_size=1, max_size=2)),
    min_size=1, max_size=2,
)


@settings(max_examples=40)
@given(small, st.integers(0, 3), st.booleans())
def test_enumeration_matches_brute_force(spec, slack_ticks, idle):
    reqs = tuple(req(a, tuple(segs)) for a, segs in spec)
    total = sum(g for _, segs in spec for g, _ in segs)
    horizon = total + max(a for a, _ in spec) + slack_ticks
    inst = TinyInstance(reqs, min(horizon, 9), allow_idle=idle)
    expected = brute_force(inst)
    assert enumerate_schedules(inst) == expected
    assert count_schedules(inst) == len(expected)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_vectorised_evaluation_agrees(seed):
    inst = random_instance(np.random.default_rng(seed))
    assume(count_schedules(inst) <= 200_000)
    S = schedule_matrix(inst)
    idx = np.linspace(0, len(S) - 1, num=min(len(S), 25)).astype(int)
    obj, comp, w0 = evaluate_matrix(inst, S[idx])
    for j, i in enumerate(idx):
        out = evaluate_schedule(inst, _split(inst, S[i]))
        assert obj[j] == pytest.approx(out.objective, abs=1e-12)
        assert np.allclose(comp[j] * inst.tick_s, out.completion)


def _split(inst, row):
    c, out = 0, []
    for r in inst.requests:
        out.append(tuple(row[c:c + len(r.segments)].tolist()))
        c += len(r.segments)
    return tuple(out)
