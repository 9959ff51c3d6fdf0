"""Experiment runner: single runs, policy comparisons, batch-size sweeps, oracle checks.

Exit codes: 0 success, 1 simulation error or oracle counterexample, 2 bad
configuration. Log verbosity comes from ``SEGSERVE_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .engine import EngineCostModel
from .metrics import AggregateTable, aggregate_log, metrics_csv
from .scheduler import Policy, SchedulerConfig, UnknownPolicy
from .simcore import ConfigError, SimConfig, run
from .workload import PRESETS, ParseError, WorkloadSpec

log = logging.getLogger("segserve")

EXIT_OK, EXIT_SIM, EXIT_CONFIG = 0, 1, 2


class ConfigFileError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    workload: WorkloadSpec
    engine: EngineCostModel
    policies: list[Policy]
    seed: int = 0
    out: Path = Path("out")
    batch_sizes: list[int] = field(default_factory=list)
    adaptive: bool = False
    jobs: int = 1
    workload_source: str = ""
    engine_source: str = "defaults"

    def to_dict(self) -> dict:
        return {
            "workload": self.workload.to_dict(),
            "workload_source": self.workload_source,
            "engine": self.engine.to_dict(),
            "engine_source": self.engine_source,
            "policies": [p.value for p in self.policies],
            "seed": self.seed,
            "out": str(self.out),
            "batch_sizes": self.batch_sizes,
            "adaptive": self.adaptive,
            "jobs": self.jobs,
        }


def _load_workload(ref: str) -> WorkloadSpec:
    if ref.upper() in PRESETS:
        return PRESETS[ref.upper()]
    path = Path(ref)
    if not path.is_file():
        raise ConfigFileError(f"workload file not found: {path}")
    try:
        return WorkloadSpec.load(path)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigFileError(f"invalid workload file {path}: {e}") from e


def _load_engine(ref: str | None) -> EngineCostModel:
    if ref is None:
        return EngineCostModel()
    path = Path(ref)
    if not path.is_file():
        raise ConfigFileError(f"engine file not found: {path}")
    try:
        return EngineCostModel.load(path)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigFileError(f"invalid engine file {path}: {e}") from e


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigFileError(f"bad integer list {text!r}") from e
    if not vals or any(v < 1 for v in vals):
        raise ConfigFileError("batch sizes must be integers >= 1")
    return vals


def build_config(args) -> ExperimentConfig:
    policies = [Policy.parse(p) for p in args.policy.split(",") if p.strip()]
    if not policies:
        raise ConfigFileError("no policy given")
    seed = args.seed
    return ExperimentConfig(
        workload=_load_workload(args.workload).with_seed(seed),
        engine=_load_engine(args.engine),
        policies=policies,
        seed=seed,
        out=Path(args.out),
        batch_sizes=_int_list(args.batch_sizes) if getattr(args, "batch_sizes", None) else [],
        adaptive=bool(getattr(args, "adaptive", False)),
        jobs=max(1, args.jobs),
        workload_source=args.workload,
        engine_source=args.engine or "defaults",
    )


# -- simulation jobs -------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    policy: str
    workload: dict
    engine: dict
    seed: int
    max_batch_size: int | None = None


@dataclass
class JobResult:
    job: Job
    eventlog_csv: str
    table: AggregateTable
    quiescent: bool


def simulate(job: Job) -> JobResult:
    cfg = SimConfig(
        engine=EngineCostModel.from_dict(job.engine),
        scheduler=SchedulerConfig(policy=Policy.parse(job.policy), max_batch_size=job.max_batch_size),
        workload=WorkloadSpec.from_dict(job.workload),
        seed=job.seed,
    )
    res = run(cfg)
    return JobResult(job, res.log.to_csv(), aggregate_log(res.log), res.quiescent)


def run_jobs(jobs: list[Job], workers: int = 1) -> list[JobResult]:
    """Run jobs, in parallel if ``workers`` > 1; results keep the input order."""
    if workers <= 1 or len(jobs) <= 1:
        return [simulate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(simulate, jobs))


def _job(cfg: ExperimentConfig, policy: Policy, size: int | None = None) -> Job:
    return Job(policy.value, cfg.workload.to_dict(), cfg.engine.to_dict(), cfg.seed, size)


# -- output ----------------------------------------------------------------------

def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _summary_values(tab: AggregateTable) -> dict[str, float]:
    vals = {r.task_type: r.mean_utility for r in tab.rows}
    vals["Urgent"] = tab.by_urgency.get("Urgent", float("nan"))
    vals["Normal"] = tab.by_urgency.get("Normal", float("nan"))
    vals["all"] = tab.mean_utility
    return vals


def comparison_csv(results: list[JobResult]) -> str:
    """Mean utility per task type for each policy, with ratios to the first."""
    tables = [_summary_values(r.table) for r in results]
    names = [r.job.policy for r in results]
    keys = []
    for t in tables:
        for k in t:
            if k not in keys:
                keys.append(k)
    header = ["task_type"] + [f"{n}_utility" for n in names] + [f"{n}/{names[0]}" for n in names]
    rows = []
    nan = float("nan")
    for k in keys:
        vals = [t.get(k, nan) for t in tables]
        base = vals[0]
        ratios = [v / base if base not in (0.0,) and base == base else nan for v in vals]
        rows.append([k] + vals + ratios)
    return _rows_csv(header, rows)


SWEEP_HEADER = ("policy", "max_batch_size", "n", "dropped", "mean_utility", "total_utility",
                "urgent_utility", "normal_utility")


def sweep_csv(results: list[JobResult]) -> str:
    rows = []
    for r in results:
        t = r.table
        rows.append([r.job.policy, "adaptive" if r.job.max_batch_size is None else r.job.max_batch_size,
                     t.n, t.dropped, t.mean_utility, t.total_utility,
                     t.by_urgency.get("Urgent", float("nan")), t.by_urgency.get("Normal", float("nan"))])
    return _rows_csv(SWEEP_HEADER, rows)


def _warn_nonquiescent(results: list[JobResult]) -> None:
    for r in results:
        if not r.quiescent:
            log.warning("%s (batch %s) hit the wall-clock cap with work pending",
                        r.job.policy, r.job.max_batch_size)


# -- commands --------------------------------------------------------------------

def cmd_run(cfg: ExperimentConfig) -> int:
    policy = cfg.policies[0]
    (res,) = run_jobs([_job(cfg, policy)])
    _warn_nonquiescent([res])
    write_atomic(cfg.out / "eventlog.csv", res.eventlog_csv)
    write_atomic(cfg.out / "metrics.csv", metrics_csv([(policy.value, cfg.workload.wid, res.table)]))
    print(f"{policy.value} on {cfg.workload.wid}: {res.table.n} requests, "
          f"mean utility {res.table.mean_utility:.4f}, dropped {res.table.dropped}")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig) -> int:
    results = run_jobs([_job(cfg, p) for p in cfg.policies], cfg.jobs)
    _warn_nonquiescent(results)
    for r in results:
        write_atomic(cfg.out / f"eventlog_{r.job.policy}.csv", r.eventlog_csv)
    write_atomic(cfg.out / "metrics.csv",
                 metrics_csv([(r.job.policy, cfg.workload.wid, r.table) for r in results]))
    text = comparison_csv(results)
    write_atomic(cfg.out / "comparison.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    if not cfg.batch_sizes and not cfg.adaptive:
        raise ConfigFileError("sweep needs --batch-sizes and/or --adaptive")
    sizes: list[int | None] = list(cfg.batch_sizes) + ([None] if cfg.adaptive else [])
    jobs = [_job(cfg, p, s) for p in cfg.policies for s in sizes]
    results = run_jobs(jobs, cfg.jobs)
    _warn_nonquiescent(results)
    text = sweep_csv(results)
    write_atomic(cfg.out / "sweep.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_oracle(path: str | None, count: int, seed: int, out: Path | None) -> int:
    from .oracle import InstanceTooLarge, load_instances, pareto_check, random_instances

    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigFileError(f"instances file not found: {p}")
        try:
            insts = load_instances(p)
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigFileError(f"invalid instances file {p}: {e}") from e
    else:
        insts = random_instances(seed, count)
    rows, failures = [], 0
    for i, inst in enumerate(insts):
        try:
            rep = pareto_check(inst)
        except InstanceTooLarge as e:
            print(f"instance {i}: skipped, InstanceTooLarge: {e}")
            rows.append([i, "skipped", "", "", "", ""])
            continue
        if rep.assumption_violated:
            status = "assumption-violated"
            log.warning("instance %d has an increasing TUF; Pareto claim not applicable", i)
        elif rep.counterexample:
            status = "counterexample"
            failures += 1
        else:
            status = "ok"
        print(f"instance {i}: {status} schedules={rep.n_schedules} maximizers={len(rep.maximizers)} "
              f"dominated_maximizers={rep.n_dominated_maximizers}")
        rows.append([i, status, rep.n_schedules, len(rep.maximizers), rep.n_dominated_maximizers,
                     rep.best_objective])
    if out is not None:
        write_atomic(out / "oracle.csv", _rows_csv(
            ("instance", "status", "schedules", "maximizers", "dominated_maximizers", "best_objective"),
            rows))
    print(f"{len(insts)} instances, {failures} counterexamples")
    return EXIT_SIM if failures else EXIT_OK


# -- entry point -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segserve", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def sim_flags(sp, multi=False):
        sp.add_argument("--workload", required=True,
                        help="workload JSON path, or a preset name (WID1, WID2, WID3)")
        sp.add_argument("--engine", help="engine cost-model JSON path (defaults if omitted)")
        sp.add_argument("--policy", default="SegPUD" if not multi else "SegPUD,FCFSBatch",
                        help="policy name" + (", comma separated" if multi else ""))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    sim_flags(sub.add_parser("run", help="one simulation; writes eventlog.csv and metrics.csv"))
    sim_flags(sub.add_parser("compare", help="several policies on one workload"), multi=True)
    sw = sub.add_parser("sweep", help="utility versus maximum batch size")
    sim_flags(sw, multi=True)
    sw.add_argument("--batch-sizes", help="comma-separated sizes, e.g. 2,4,6,8,12,16")
    sw.add_argument("--adaptive", action="store_true", help="also run with admission control")

    orc = sub.add_parser("oracle", help="Pareto check of objective maximizers on tiny instances")
    orc.add_argument("--instances", help="JSON instance file (random instances if omitted)")
    orc.add_argument("--count", type=int, default=200)
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--out", help="directory for oracle.csv")
    orc.add_argument("--dry-run", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SEGSERVE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "oracle":
            if args.dry_run:
                print(json.dumps({"instances": args.instances, "count": args.count,
                                  "seed": args.seed, "out": args.out}, indent=2))
                return EXIT_OK
            return cmd_oracle(args.instances, args.count, args.seed,
                              Path(args.out) if args.out else None)
        cfg = build_config(args)
        if args.dry_run:
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        return {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep}[args.command](cfg)
    except (ConfigFileError, ConfigError, UnknownPolicy, ParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # any module failure during simulation
        log.debug("simulation failure", exc_info=True)
        print(f"simulation error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
