"""Scripted robot traces, execution-time models and Poisson workload composition."""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tuf import Urgency, UrgencyClass

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """Malformed trace library or workload file."""


class UnknownSkill(KeyError):
    """A skill has no entry in the execution-time model."""


class EmptyTracePool(ValueError):
    pass


class AgentExhausted(UserWarning):
    """An event asked for more tasks than there were idle agents."""


class TraceCategory(str, enum.Enum):
    DRONE_NORMAL = "DroneNormal"
    DRONE_URGENT = "DroneUrgent"
    ARM_COMPLEX = "ArmComplex"
    CHATBOT = "Chatbot"


@dataclass(frozen=True)
class SkillCall:
    name: str
    params: tuple = ()
    token_count: int = 1
    text: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("skill name must be nonempty")
        if self.token_count < 1:
            raise ValueError(f"token_count must be >= 1, got {self.token_count}")
        if len(self.rendered) < self.token_count:
            raise ValueError(f"{self.rendered!r} is shorter than its {self.token_count} tokens")

    @property
    def rendered(self) -> str:
        """Plan text for this call, terminator included."""
        if self.text is not None:
            return self.text
        args = ",".join(_fmt_param(p) for p in self.params)
        return f"{self.name}({args});"

    def token_fragments(self) -> list[str]:
        """Split the rendered text into ``token_count`` contiguous, nonempty pieces."""
        s = self.rendered
        n = self.token_count
        cuts = [round(i * len(s) / n) for i in range(n + 1)]
        return [s[cuts[i]:cuts[i + 1]] for i in range(n)]


def _fmt_param(p) -> str:
    if isinstance(p, str):
        return repr(p)
    if isinstance(p, float) and p.is_integer():
        return str(int(p))
    return str(p)


@dataclass(frozen=True)
class TaskTrace:
    trace_id: int
    category: TraceCategory
    prompt_tokens: int
    plan: tuple[SkillCall, ...]
    urgency: UrgencyClass
    description: str = ""

    def __post_init__(self):
        if not self.plan:
            raise ValueError(f"trace {self.trace_id}: plan is empty")
        if self.prompt_tokens <= 0:
            raise ValueError(f"trace {self.trace_id}: prompt_tokens must be > 0")
        urgent = self.urgency.kind is Urgency.URGENT
        if urgent != (self.category is TraceCategory.DRONE_URGENT):
            raise ValueError(
                f"trace {self.trace_id}: category {self.category.value} "
                f"inconsistent with urgency {self.urgency.kind.value}"
            )

    @property
    def text(self) -> str:
        return "".join(s.rendered for s in self.plan)

    @property
    def output_tokens(self) -> int:
        return sum(s.token_count for s in self.plan)


# ---------------------------------------------------------------------------
# execution-time model


class Mode(str, enum.Enum):
    SAMPLE = "Sample"
    MEAN = "Mean"
    MIN = "Min"


@dataclass(frozen=True)
class Parametric:
    """``intercept + sum(coef[i] * params[i])`` seconds over the numeric params."""

    intercept: float
    coef: tuple[float, ...] = ()

    def value(self, params: Sequence) -> float:
        nums = [float(p) for p in params if isinstance(p, (int, float))]
        return self.intercept + sum(c * x for c, x in zip(self.coef, nums))

    def to_dict(self):
        return {"kind": "parametric", "intercept": self.intercept, "coef": list(self.coef)}


@dataclass(frozen=True)
class Sampled:
    values: tuple[float, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.values:
            raise ValueError("sampled profile needs at least one value")

    def to_dict(self):
        d = {"kind": "sampled", "values": list(self.values)}
        if self.labels:
            d["labels"] = list(self.labels)
        return d


@dataclass(frozen=True)
class Constant:
    mean: float

    def to_dict(self):
        return {"kind": "constant", "mean": self.mean}


SkillProfile = Parametric | Sampled | Constant


def profile_from_dict(d: dict) -> SkillProfile:
    kind = d.get("kind")
    if kind == "parametric":
        return Parametric(float(d["intercept"]), tuple(float(c) for c in d.get("coef", ())))
    if kind == "sampled":
        return Sampled(tuple(float(v) for v in d["values"]), tuple(d.get("labels", ())))
    if kind == "constant":
        return Constant(float(d["mean"]))
    raise ValueError(f"unknown exec_profile kind {kind!r}")


@dataclass
class ExecutionTimeModel:
    profiles: dict[str, SkillProfile] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.profiles

    def profile(self, name: str) -> SkillProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise UnknownSkill(name) from None

    def add(self, name: str, profile: SkillProfile) -> None:
        old = self.profiles.get(name)
        if old is not None and old != profile:
            raise ValueError(f"conflicting execution profiles for skill {name!r}")
        self.profiles[name] = profile


def sample_execution_time(
    model: ExecutionTimeModel,
    skill: SkillCall,
    mode: Mode | str = Mode.SAMPLE,
    rng: np.random.Generator | None = None,
) -> float:
    mode = Mode(mode)
    prof = model.profile(skill.name)
    if isinstance(prof, Constant):
        return prof.mean
    if isinstance(prof, Parametric):
        return prof.value(skill.params)
    vals = prof.values
    if mode is Mode.MIN:
        return min(vals)
    if mode is Mode.MEAN:
        return sum(vals) / len(vals)
    if rng is None:
        raise ValueError("Sample mode needs an rng")
    return vals[int(rng.integers(len(vals)))]


def estimate_segment_execution(model: ExecutionTimeModel, segment: Iterable[SkillCall]) -> float:
    """Lower-bound execution time of a segment: sum of per-skill minima."""
    return sum(sample_execution_time(model, s, Mode.MIN) for s in segment)


# ---------------------------------------------------------------------------
# trace library


@dataclass
class TraceLibrary:
    traces: dict[int, TaskTrace]
    exec_model: ExecutionTimeModel

    def __getitem__(self, trace_id: int) -> TaskTrace:
        return self.traces[trace_id]

    def __contains__(self, trace_id) -> bool:
        return trace_id in self.traces

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces.values())

    def robot_traces(self) -> list[TaskTrace]:
        return [t for t in self if t.category is not TraceCategory.CHATBOT]

    def skill_names(self) -> set[str]:
        return {s.name for t in self for s in t.plan}


def _parse_trace(obj: dict, where: str, model: ExecutionTimeModel) -> TaskTrace:
    try:
        plan = []
        for j, item in enumerate(obj["plan"]):
            call = SkillCall(
                name=str(item["name"]),
                params=tuple(item.get("params", ())),
                token_count=int(item["token_count"]),
                text=item.get("text"),
            )
            if "exec_profile" in item:
                try:
                    model.add(call.name, profile_from_dict(item["exec_profile"]))
                except ValueError as e:
                    raise ParseError(f"{where}: plan[{j}].exec_profile: {e}") from None
            plan.append(call)
        return TaskTrace(
            trace_id=int(obj["trace_id"]),
            category=TraceCategory(obj["category"]),
            prompt_tokens=int(obj["prompt_tokens"]),
            plan=tuple(plan),
            urgency=UrgencyClass.from_dict(obj["urgency"]),
            description=str(obj.get("description", "")),
        )
    except ParseError:
        raise
    except KeyError as e:
        raise ParseError(f"{where}: missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise ParseError(f"{where}: {e}") from None


def parse_trace_lines(lines: Iterable[str], source: str = "<string>") -> TraceLibrary:
    model = ExecutionTimeModel()
    traces: dict[int, TaskTrace] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{where}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict):
            raise ParseError(f"{where}: expected an object")
        tr = _parse_trace(obj, where, model)
        if tr.trace_id in traces:
            raise ParseError(f"{where}: duplicate trace_id {tr.trace_id}")
        traces[tr.trace_id] = tr
    if not traces:
        raise ParseError(f"{source}: no traces")
    return TraceLibrary(traces, model)


def load_trace_library(path: str | Path) -> TraceLibrary:
    path = Path(path)
    with path.open() as fh:
        return parse_trace_lines(fh, str(path))


def dump_trace_library(lib: TraceLibrary, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for tr in lib:
            plan = []
            for s in tr.plan:
                item = {"name": s.name, "params": list(s.params), "token_count": s.token_count}
                if s.text is not None:
                    item["text"] = s.text
                if s.name in lib.exec_model:
                    item["exec_profile"] = lib.exec_model.profile(s.name).to_dict()
                plan.append(item)
            obj = {
                "trace_id": tr.trace_id,
                "category": tr.category.value,
                "description": tr.description,
                "prompt_tokens": tr.prompt_tokens,
                "plan": plan,
                "urgency": tr.urgency.to_dict(),
            }
            fh.write(json.dumps(obj) + "\n")


_BUILTIN: TraceLibrary | None = None


def builtin_library() -> TraceLibrary:
    global _BUILTIN
    if _BUILTIN is None:
        text = resources.files("segserve.data").joinpath("traces.jsonl").read_text()
        _BUILTIN = parse_trace_lines(text.splitlines(), "traces.jsonl")
    return _BUILTIN


# ---------------------------------------------------------------------------
# workload composition


@dataclass(frozen=True)
class WorkloadSpec:
    events_per_second: float
    max_tasks_per_event: int
    trace_pool: tuple[int, ...]
    agent_count: int
    duration: float
    seed: int = 0
    wid: str = "custom"

    def __post_init__(self):
        if not self.events_per_second > 0:
            raise ValueError("events_per_second must be > 0")
        if not 1 <= self.max_tasks_per_event <= self.agent_count:
            raise ValueError("need 1 <= max_tasks_per_event <= agent_count")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if not self.trace_pool:
            raise EmptyTracePool("trace_pool is empty")

    def with_seed(self, seed: int) -> "WorkloadSpec":
        return WorkloadSpec(
            self.events_per_second, self.max_tasks_per_event, self.trace_pool,
            self.agent_count, self.duration, seed, self.wid,
        )

    def to_dict(self) -> dict:
        return {
            "wid": self.wid,
            "events_per_second": self.events_per_second,
            "max_tasks_per_event": self.max_tasks_per_event,
            "trace_pool": list(self.trace_pool),
            "agent_count": self.agent_count,
            "duration_s": self.duration,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        try:
            pool = tuple(int(x) for x in d["trace_pool"])
            if not pool:
                raise EmptyTracePool("trace_pool is empty")
            return cls(
                events_per_second=float(d["events_per_second"]),
                max_tasks_per_event=int(d["max_tasks_per_event"]),
                trace_pool=pool,
                agent_count=int(d["agent_count"]),
                duration=float(d.get("duration_s", d.get("duration"))),
                seed=int(d.get("seed", 0)),
                wid=str(d.get("wid", "custom")),
            )
        except KeyError as e:
            raise ParseError(f"workload config: missing field {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, EmptyTracePool):
                raise
            raise ParseError(f"workload config: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON ({e.msg})") from None
        return cls.from_dict(d)


WID1 = WorkloadSpec(0.25, 8, tuple(range(1, 9)), 25, 260.0, wid="WID1")
WID2 = WorkloadSpec(0.25, 16, tuple(range(1, 9)), 42, 300.0, wid="WID2")
WID3 = WorkloadSpec(0.1, 8, (9, 10, 11), 40, 900.0, wid="WID3")
PRESETS = {"WID1": WID1, "WID2": WID2, "WID3": WID3}


@dataclass(frozen=True)
class ArrivalEvent:
    time: float
    agent_id: int
    trace_id: int
    event_index: int


def _busy_estimate(trace: TaskTrace, model: ExecutionTimeModel | None) -> float:
    # how long an agent is considered taken after receiving this task
    gen = 0.09 * len(trace.plan) + trace.urgency.tuf.ert
    if model is None:
        return gen
    return gen + sum(sample_execution_time(model, s, Mode.MEAN) for s in trace.plan)


def compose_workload(
    spec: WorkloadSpec,
    library: TraceLibrary | None = None,
) -> list[ArrivalEvent]:
    """Poisson event stream over ``spec.duration``; each event starts 1..max tasks.

    Agents are taken round-robin among those considered idle; an agent counts
    as busy until its last task's mean execution time (plus a generation
    allowance) has elapsed. Tasks beyond the idle supply are dropped.
    """
    if not spec.trace_pool:
        raise EmptyTracePool("trace_pool is empty")
    if library is not None:
        missing = [t for t in spec.trace_pool if t not in library]
        if missing:
            raise ValueError(f"trace_pool references unknown traces {missing}")
    rng = np.random.default_rng(spec.seed)
    busy_until = [-np.inf] * spec.agent_count
    cursor = 0
    out: list[ArrivalEvent] = []
    t = 0.0
    ev = 0
    dropped = 0
    while True:
        t += float(rng.exponential(1.0 / spec.events_per_second))
        if t > spec.duration:
            break
        n = int(rng.integers(1, spec.max_tasks_per_event + 1))
        traces = [spec.trace_pool[int(i)] for i in rng.integers(len(spec.trace_pool), size=n)]
        assigned = 0
        for k in range(spec.agent_count):
            if assigned == n:
                break
            a = (cursor + k) % spec.agent_count
            if busy_until[a] > t:
                continue
            tid = traces[assigned]
            out.append(ArrivalEvent(t, a, tid, ev))
            tr = library[tid] if library is not None else None
            busy_until[a] = t + (_busy_estimate(tr, library.exec_model) if tr else 0.0)
            assigned += 1
            cursor = (a + 1) % spec.agent_count
        if assigned < n:
            dropped += n - assigned
            log.debug("event %d at t=%.3f: %d of %d tasks dropped, no idle agent",
                      ev, t, n - assigned, n)
        ev += 1
    if dropped:
        warnings.warn(AgentExhausted(
            f"{spec.wid} seed {spec.seed}: {dropped} tasks dropped for lack of an idle agent"),
            stacklevel=2)
    return out


def chatbot_read_seconds(word_count: int) -> float:
    """Reading delay at 300 words per minute."""
    return word_count * 60.0 / 300.0
