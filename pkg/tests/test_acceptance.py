"""Acceptance criteria 1 to 10, each at its stated tolerance.

Every test reports one PASS/FAIL line (collected in the terminal summary)
and then asserts. Simulation runs are cached so that the invariant audit
of criterion 10 covers exactly the logs behind criteria 4 to 7.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from segserve.cli import Job, run_jobs, sweep_csv
from segserve.metrics import (
    aggregate_log,
    audit_log,
    metrics_csv,
    realized_chained_utility,
    segmentation_overhead,
    summarize_log,
)
from segserve.oracle import objective_eq3, pareto_check, random_instances, replay, schedule_matrix
from segserve.oracle import _rows_to_schedules
from segserve.scheduler import Policy, QueuedTask, SchedulerConfig, TaskQueue
from segserve.simcore import SimConfig, run
from segserve.tuf import NORMAL_TUF, URGENT_TUF, TimeUtilityFunction, eval_tuf, eval_tuf_suspended
from segserve.workload import PRESETS, builtin_library

SEEDS = range(5)
SWEEP_SEEDS = range(3)
SWEEP_SIZES = (2, 4, 6, 8, 12, 16)


@lru_cache(maxsize=None)
def simulate(wid: str, policy: str, seed: int, max_batch: int | None = None):
    cfg = SimConfig(workload=PRESETS[wid].with_seed(seed),
                    scheduler=SchedulerConfig(Policy.parse(policy), max_batch_size=max_batch),
                    seed=seed)
    return run(cfg)


def table(wid, policy, seed, max_batch=None):
    return aggregate_log(simulate(wid, policy, seed, max_batch).log)


def seed_mean(wid, policy, urgency, seeds=SEEDS):
    return float(np.mean([table(wid, policy, s).by_urgency[urgency] for s in seeds]))


# -- 1 ----------------------------------------------------------------------

R = TimeUtilityFunction
TUF_CASES = [
    # (curve, latency, hand-computed value, suspended?)
    (NORMAL_TUF, 0.0, 1.0, False),
    (NORMAL_TUF, 0.5, 1.0, False),
    (NORMAL_TUF, 1.0, 1.0, False),
    (NORMAL_TUF, 1.25, 0.5, False),
    (NORMAL_TUF, 1.5, 0.0, False),
    (NORMAL_TUF, 2.0, -1.0, False),
    (NORMAL_TUF, -3.0, 1.0, False),
    (URGENT_TUF, 0.1, 2.0, False),
    (URGENT_TUF, 0.2, 2.0, False),
    (URGENT_TUF, 0.3, 1.333, False),
    (URGENT_TUF, 1.2, -4.67, False),
    (R(3.0, -0.5, 4.0), 10.0, 0.0, False),
    (R(1.0, 0.0, 0.0), 99.0, 1.0, False),
    (NORMAL_TUF, -3.0, 1.0, True),
    (NORMAL_TUF, 0.0, 1.0, True),
    (NORMAL_TUF, 0.25, 0.5, True),
    (NORMAL_TUF, 0.5, 0.0, True),
    (URGENT_TUF, 0.0, 2.0, True),
    (URGENT_TUF, 0.1, 1.333, True),
    (URGENT_TUF, 0.3, -0.001, True),
]


def test_criterion_1_tuf_exactness(report):
    errs = []
    for f, t, want, susp in TUF_CASES:
        got = eval_tuf_suspended(f, t) if susp else eval_tuf(f, t)
        errs.append(abs(got - want) / max(1.0, abs(want)))
    cutoff = eval_tuf(URGENT_TUF, 0.5)
    ok = len(TUF_CASES) == 20 and max(errs) <= 1e-9 and abs(cutoff) < 0.01
    report(1, ok, f"20 cases, max rel err {max(errs):.2e}; urgent value at 0.5 s = {cutoff:+.4f}")
    assert ok


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_pareto_oracle(report):
    insts = random_instances(0, 200)
    t0 = time.perf_counter()
    reps = [pareto_check(i) for i in insts]
    elapsed = time.perf_counter() - t0
    counter = [k for k, r in enumerate(reps) if r.counterexample]
    some_dominated = sum(r.any_maximizer_dominated for r in reps)
    ok = not counter and elapsed < 300
    report(2, ok, f"{len(counter)}/200 instances with no Pareto-optimal maximizer "
                  f"({some_dominated} with some dominated maximizer), {elapsed:.1f} s")
    assert ok, f"counterexample instances: {counter}"


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_cross_oracle(report):
    rng = np.random.default_rng(3)
    worst, n = 0.0, 0
    for inst in random_instances(1, 60):
        rows = schedule_matrix(inst)
        pick = rows[rng.integers(len(rows), size=min(2, len(rows)))]
        for sched in _rows_to_schedules(inst, pick):
            s = summarize_log(replay(inst, sched).log)
            assert not s.incomplete
            worst = max(worst, abs(realized_chained_utility(s.completed) - objective_eq3(inst, sched)))
            n += 1
    ok = n >= 50 and worst <= 1e-9
    report(3, ok, f"{n} replayed schedules, max |difference| {worst:.1e}")
    assert ok


# -- 4 ----------------------------------------------------------------------

def test_criterion_4_urgent_trend(report):
    pud_u, base_u = seed_mean("WID1", "SegPUD", "Urgent"), seed_mean("WID1", "FCFSBatch", "Urgent")
    pud_n, base_n = seed_mean("WID1", "SegPUD", "Normal"), seed_mean("WID1", "FCFSBatch", "Normal")
    ok = pud_u >= 1.3 * base_u and pud_n >= 0.95 * base_n
    report(4, ok, f"WID1 x{len(SEEDS)} seeds: urgent {pud_u:.3f} vs {base_u:.3f} "
                  f"({pud_u / base_u:.2f}x), normal {pud_n:.3f} vs {base_n:.3f}")
    assert ok


# -- 5 ----------------------------------------------------------------------

def test_criterion_5_policy_ablation(report):
    pud = seed_mean("WID2", "SegPUD", "Urgent")
    fcfs = seed_mean("WID2", "SegFCFS", "Urgent")
    edf = seed_mean("WID2", "SegEDF", "Urgent")
    ok = pud >= 1.4 * fcfs and pud >= 1.2 * edf
    report(5, ok, f"WID2 x{len(SEEDS)} seeds urgent: SegPUD {pud:.3f}, SegFCFS {fcfs:.3f} "
                  f"({pud / fcfs:.2f}x, need 1.4), SegEDF {edf:.3f} ({pud / edf:.2f}x, need 1.2)")
    assert ok


# -- 6 ----------------------------------------------------------------------

def _non_monotone(curve):
    peak = int(np.argmax(curve))
    last_step = curve[-1] - curve[-2]
    return peak < len(curve) - 1 or last_step <= 0.01 * abs(max(curve))


def test_criterion_6_batch_sweep(report):
    curves = {}
    for p in ("SegPUD", "FCFSBatch"):
        curves[p] = [float(np.mean([table("WID2", p, s, b).total_utility for s in SWEEP_SEEDS]))
                     for b in SWEEP_SIZES]
    pud, base = np.array(curves["SegPUD"]), np.array(curves["FCFSBatch"])
    ok = bool(np.all(pud >= base)) and _non_monotone(pud) and _non_monotone(base)
    fmt = lambda c: "/".join(f"{v:.0f}" for v in c)  # noqa: E731
    report(6, ok, f"sizes {SWEEP_SIZES}: SegPUD {fmt(pud)}; FCFSBatch {fmt(base)}")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_streaming(report):
    lib = builtin_library()
    longest = max(PRESETS["WID3"].trace_pool, key=lambda t: len(lib[t].plan))

    def wait(p):
        vals = []
        for s in SEEDS:
            try:
                vals.append(table("WID3", p, s).row(longest).mean_waiting_s)
            except KeyError:
                pass
        return float(np.mean(vals))

    w_pud, w_base = wait("SegPUD"), wait("FCFSBatch")
    reduction = 1 - w_pud / w_base
    # WID3 has no urgent tasks, so the utility ordering uses all requests
    u = {p: float(np.mean([table("WID3", p, s).mean_utility for s in SEEDS]))
         for p in ("FCFSBatch", "StreamFCFS", "SegPUD")}
    between = u["FCFSBatch"] < u["StreamFCFS"] < u["SegPUD"]
    ok = reduction >= 0.5 and between
    report(7, ok, f"trace {longest} waiting {w_pud:.2f} s vs {w_base:.2f} s ({reduction:.0%} less); "
                  f"utility FCFSBatch {u['FCFSBatch']:.3f} < StreamFCFS {u['StreamFCFS']:.3f} "
                  f"< SegPUD {u['SegPUD']:.3f}")
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_criterion_8_overheads(report):
    over = [segmentation_overhead(t) for t in range(1, 9)]
    q = TaskQueue(Policy.SEG_PUD, 0.008)
    for i in range(8):
        f = URGENT_TUF if i % 3 == 0 else NORMAL_TUF
        q.push(QueuedTask(i, i, 0, 0.1 * i, 0.1 * i + f.ert, f, 0.09, 0.1 * i + f.ert), 0.0)
    samples = []
    for k in range(200):
        t0 = time.perf_counter()
        q.update_all_priorities(0.01 * k)
        samples.append(time.perf_counter() - t0)
    update_ms = float(np.median(samples)) * 1000
    ok = max(over) <= 0.06 and update_ms < 5.0
    report(8, ok, f"segmentation overhead max {max(over):.1%} over traces 1-8; "
                  f"8-task priority update {update_ms:.3f} ms (median)")
    assert ok


# -- 9 ----------------------------------------------------------------------

def test_criterion_9_determinism(report):
    fresh = lambda: run(SimConfig(workload=PRESETS["WID2"].with_seed(7), seed=7))  # noqa: E731
    a, b = fresh(), fresh()
    logs_equal = a.log.to_csv() == b.log.to_csv()
    csv_equal = (metrics_csv([("SegPUD", "WID2", aggregate_log(a.log))])
                 == metrics_csv([("SegPUD", "WID2", aggregate_log(b.log))]))
    jobs = [Job(p, PRESETS["WID1"].with_seed(7).to_dict(), {}, 7, size)
            for p in ("SegPUD", "FCFSBatch") for size in (2, 8)]
    serial, parallel = run_jobs(jobs, 1), run_jobs(jobs, 2)
    sweep_equal = (sweep_csv(serial) == sweep_csv(parallel)
                   and [r.eventlog_csv for r in serial] == [r.eventlog_csv for r in parallel])
    ok = logs_equal and csv_equal and sweep_equal
    report(9, ok, f"event logs identical {logs_equal}, metrics CSV identical {csv_equal}, "
                  f"parallel sweep identical {sweep_equal}")
    assert ok


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_invariants(report):
    lib = builtin_library()
    runs = [("WID1", p, s, None) for p in ("SegPUD", "FCFSBatch") for s in SEEDS]
    runs += [("WID2", p, s, None) for p in ("SegPUD", "SegFCFS", "SegEDF") for s in SEEDS]
    runs += [("WID2", p, s, b) for p in ("SegPUD", "FCFSBatch") for s in SWEEP_SEEDS for b in SWEEP_SIZES]
    runs += [("WID3", p, s, None) for p in ("SegPUD", "FCFSBatch", "StreamFCFS") for s in SEEDS]
    problems = []
    for key in runs:
        for msg in audit_log(simulate(*key).log, lib):
            problems.append(f"{key}: {msg}")
    ok = not problems
    report(10, ok, f"{len(runs)} event logs audited, {len(problems)} violations")
    assert ok, problems[:5]
