"""Simulated LLM inference engine.

Token-granular continuous batching over scripted traces. Every running
generation advances one token per iteration; iteration latency comes from a
linear batch-interference model plus one-off lumps (prefill on a request's
first iteration, KV restore after a swap). KV memory is accounted per context
and suspended contexts are evicted to host memory lazily, oldest first.
"""

from __future__ import annotations

import enum
import json
import re
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .workload import SkillCall, TaskTrace

# prefill of the 2884-token profiling prompt took 328.45 ms
DEFAULT_PREFILL_MS_PER_TOKEN = 328.45 / 2884
# 0.052 ms to detokenize 15 tokens
DEFAULT_DETOK_MS_PER_TOKEN = 0.052 / 15


class OutOfMemory(RuntimeError):
    pass


@dataclass
class EngineCostModel:
    decode_ms_per_token: float = 21.77
    prefill_ms_per_prompt_token: float = DEFAULT_PREFILL_MS_PER_TOKEN
    batch_slowdown_gamma: float = 0.05
    kv_mb_per_request: float = 170.35
    gpu_memory_mb: float = 2048.0
    swap_restore_ms: float = 9.50
    reprefill_ms: float = 133.31
    detok_ms_per_token: float = DEFAULT_DETOK_MS_PER_TOKEN
    network_latency_ms: float = 8.0
    stop_check_ms_per_token: float = 0.4
    context_save_ms: float = 1.5
    kv_cache_disabled: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "kv_cache_disabled" and v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        if not self.swap_restore_ms < self.reprefill_ms:
            raise ValueError("swap_restore_ms must be below reprefill_ms")

    def decode_ms(self, batch_size: int) -> float:
        """Per-iteration decode latency for a batch, excluding one-off lumps."""
        return self.decode_ms_per_token * (1.0 + self.batch_slowdown_gamma * (batch_size - 1))

    def steady_iteration_ms(self, batch_size: int, stop_checks: bool = True) -> float:
        per_tok = self.detok_ms_per_token + (self.stop_check_ms_per_token if stop_checks else 0.0)
        return self.decode_ms(batch_size) + per_tok * batch_size

    def prefill_ms(self, prompt_tokens: int) -> float:
        return self.prefill_ms_per_prompt_token * prompt_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineCostModel":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown engine fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "EngineCostModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class KVLocation(str, enum.Enum):
    GPU = "GPU"
    HOST = "Host"
    NONE = "None"


class GenStatus(str, enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    SUSPENDED = "Suspended"
    FINISHED = "Finished"


class StopKind(str, enum.Enum):
    SKILL = "SkillPattern"
    SENTENCE = "Sentence"
    PARAGRAPH = "Paragraph"
    NONE = "None"


_CALL_RE = re.compile(r"(?P<name>[A-Za-z_]\w*)\((?P<args>[^()]*)\)\s*(?:;|->)")


@dataclass(frozen=True)
class StopRule:
    kind: StopKind
    skills: frozenset = frozenset()

    def __post_init__(self):
        if self.kind is StopKind.SKILL and not self.skills:
            raise ValueError("SkillPattern rule needs a nonempty skill set")

    @classmethod
    def skill_pattern(cls, names: Iterable[str]) -> "StopRule":
        return cls(StopKind.SKILL, frozenset(names))

    @classmethod
    def sentence(cls) -> "StopRule":
        return cls(StopKind.SENTENCE)

    @classmethod
    def paragraph(cls) -> "StopRule":
        return cls(StopKind.PARAGRAPH)

    @classmethod
    def none(cls) -> "StopRule":
        return cls(StopKind.NONE)


class BoundaryReason(str, enum.Enum):
    SKILL = "skill"
    SENTENCE = "sentence"
    PARAGRAPH = "paragraph"
    CAP = "cap"
    END = "end"


@dataclass(frozen=True)
class SegmentBoundary:
    reason: BoundaryReason
    calls: tuple[SkillCall, ...] = ()

    @property
    def end_of_plan(self) -> bool:
        return self.reason is BoundaryReason.END


def parse_calls(text: str) -> list[SkillCall]:
    out = []
    for m in _CALL_RE.finditer(text):
        args = [a.strip() for a in m["args"].split(",") if a.strip()]
        params = []
        for a in args:
            try:
                params.append(int(a))
            except ValueError:
                try:
                    params.append(float(a))
                except ValueError:
                    params.append(a.strip("'\""))
        out.append(SkillCall(m["name"], tuple(params)))
    return out


@dataclass
class GenerationState:
    request_id: int
    agent_id: int
    trace: TaskTrace
    max_segment_tokens: int = 10
    segment_index: int = 0
    tokens_emitted_total: int = 0
    tokens_in_current_segment: int = 0
    items_dispatched: int = 0
    kv_location: KVLocation = KVLocation.NONE
    kv_size_mb: float = 0.0
    status: GenStatus = GenStatus.QUEUED
    pending_text: str = ""
    prefilled: bool = False
    suspended_at: float | None = None
    token_ids: list = field(default_factory=list)
    text: str = ""
    recent: deque = field(default_factory=lambda: deque(maxlen=5))

    def __post_init__(self):
        frags = []
        for s in self.trace.plan:
            frags.extend(s.token_fragments())
        self._fragments = frags
        ends, acc = [], 0
        for s in self.trace.plan:
            acc += s.token_count
            ends.append(acc)
        self._item_ends = ends

    @property
    def total_tokens(self) -> int:
        return len(self._fragments)

    @property
    def plan_cursor(self) -> int:
        return self.tokens_emitted_total

    def next_fragment(self) -> str:
        return self._fragments[self.tokens_emitted_total]

    def items_completed(self, tokens: int | None = None) -> int:
        n = self.tokens_emitted_total if tokens is None else tokens
        return sum(1 for e in self._item_ends if e <= n)

    def recent_per_token_ms(self) -> list[tuple[float, int]]:
        return list(self.recent)


def check_segment_boundary(
    rule: StopRule, gen: GenerationState, new_fragment: str
) -> SegmentBoundary | None:
    """Would emitting ``new_fragment`` next close the current segment?

    Evaluated on ``gen`` as it stands before the emission. The accumulated
    text runs from the last completed skill, so a call split by a forced cap
    boundary is still recognised.
    """
    text = gen.pending_text + new_fragment
    calls: list[SkillCall] = []
    reason = None
    if rule.kind is StopKind.SKILL:
        found = [c for c in parse_calls(text) if c.name in rule.skills]
        if found and text.rstrip().endswith((";", "->")):
            reason, calls = BoundaryReason.SKILL, found
    elif rule.kind is StopKind.SENTENCE:
        if text.rstrip().endswith((".", "!", "?")):
            reason = BoundaryReason.SENTENCE
    elif rule.kind is StopKind.PARAGRAPH:
        if text.endswith("\n\n"):
            reason = BoundaryReason.PARAGRAPH
    if gen.tokens_emitted_total + 1 >= gen.total_tokens:
        return SegmentBoundary(BoundaryReason.END, tuple(calls))
    if reason is not None:
        return SegmentBoundary(reason, tuple(calls))
    if rule.kind is not StopKind.NONE and gen.tokens_in_current_segment + 1 >= gen.max_segment_tokens:
        return SegmentBoundary(BoundaryReason.CAP)
    return None


@dataclass(frozen=True)
class TokenEmission:
    request_id: int
    token_index: int
    text_fragment: str
    token_id: int
    end_of_plan: bool = False


@dataclass(frozen=True)
class SuspendReceipt:
    kv_size_mb: float
    token_snapshot: tuple[int, ...]

    @property
    def snapshot_bytes(self) -> int:
        # 40-byte header + one int64 per token id
        return 40 + 8 * len(self.token_snapshot)


@dataclass
class IterationResult:
    start: float
    end: float
    latency_ms: float
    restore_ms: float
    batch_size: int
    emissions: list[TokenEmission]
    boundaries: dict[int, SegmentBoundary]


def token_id(fragment: str) -> int:
    return zlib.crc32(fragment.encode()) % 128_000


def iteration_latency(model: EngineCostModel, batch: Iterable[GenerationState]) -> float:
    """Decode latency of one iteration, with first-iteration prefill folded in."""
    batch = list(batch)
    if not batch:
        raise ValueError("iteration over an empty batch")
    ms = model.decode_ms(len(batch))
    for g in batch:
        if not g.prefilled:
            ms += model.prefill_ms(g.trace.prompt_tokens)
    return ms


class Engine:
    def __init__(
        self,
        model: EngineCostModel | None = None,
        stop_rule: StopRule | None = None,
        max_segment_tokens: int = 10,
        suspend_at_boundaries: bool = True,
    ):
        self.model = model or EngineCostModel()
        self.stop_rule = stop_rule or StopRule.none()
        self.max_segment_tokens = max_segment_tokens
        self.suspend_at_boundaries = suspend_at_boundaries
        self.running: list[GenerationState] = []
        self.contexts: dict[int, GenerationState] = {}
        self._pending_restore_ms = 0.0
        self.iteration_ms_total = 0.0
        self.restore_ms_total = 0.0
        self.iterations = 0

    # -- memory ---------------------------------------------------------

    def resident_mb(self) -> float:
        return sum(g.kv_size_mb for g in self.contexts.values() if g.kv_location is KVLocation.GPU)

    def free_gpu_memory(self) -> float:
        return self.model.gpu_memory_mb - self.resident_mb()

    def evictable_mb(self, exclude: int | None = None) -> float:
        return sum(
            g.kv_size_mb for g in self.contexts.values()
            if g.status is GenStatus.SUSPENDED and g.kv_location is KVLocation.GPU
            and g.request_id != exclude
        )

    def kv_requirement(self, gen: GenerationState) -> float:
        return 0.0 if gen.kv_location is KVLocation.GPU else self.model.kv_mb_per_request

    def can_fit(self, gen: GenerationState) -> bool:
        need = self.kv_requirement(gen)
        return need <= self.free_gpu_memory() + self.evictable_mb(exclude=gen.request_id) + 1e-9

    def _make_room(self, need_mb: float, exclude: int) -> None:
        if need_mb <= self.free_gpu_memory() + 1e-9:
            return
        victims = sorted(
            (g for g in self.contexts.values()
             if g.status is GenStatus.SUSPENDED and g.kv_location is KVLocation.GPU
             and g.request_id != exclude),
            key=lambda g: (g.suspended_at, g.request_id),
        )
        for v in victims:
            v.kv_location = KVLocation.HOST
            if need_mb <= self.free_gpu_memory() + 1e-9:
                return
        raise OutOfMemory(f"need {need_mb:.2f} MB, {self.free_gpu_memory():.2f} MB free")

    # -- lifecycle ------------------------------------------------------

    def first_iteration_cost_ms(self, gen: GenerationState) -> float:
        """One-off latency a generation adds to the iteration it joins."""
        if gen.status is GenStatus.QUEUED and not gen.prefilled:
            return self.model.prefill_ms(gen.trace.prompt_tokens)
        if self.model.kv_cache_disabled:
            return self.model.reprefill_ms
        if gen.kv_location is KVLocation.HOST:
            return self.model.swap_restore_ms
        return 0.0

    def admit(self, gen: GenerationState, now: float) -> float:
        """Put a queued or suspended generation into the running batch.

        Returns the restoration latency charged (0 for a fresh request, whose
        prefill is charged by the iteration itself).
        """
        if gen.status is GenStatus.SUSPENDED:
            return self.resume(gen, now)
        if gen.status is not GenStatus.QUEUED:
            raise ValueError(f"request {gen.request_id} is {gen.status.value}")
        self._make_room(self.model.kv_mb_per_request, gen.request_id)
        gen.kv_location = KVLocation.GPU
        gen.kv_size_mb = self.model.kv_mb_per_request
        gen.max_segment_tokens = self.max_segment_tokens
        gen.status = GenStatus.RUNNING
        self.contexts[gen.request_id] = gen
        self.running.append(gen)
        return 0.0

    def suspend(self, gen: GenerationState, now: float) -> SuspendReceipt:
        if gen.status is not GenStatus.RUNNING:
            raise ValueError(f"request {gen.request_id} is not running")
        self.running.remove(gen)
        gen.status = GenStatus.SUSPENDED
        gen.suspended_at = now
        gen.segment_index += 1
        gen.tokens_in_current_segment = 0
        if self.model.kv_cache_disabled:
            gen.kv_location = KVLocation.NONE
        receipt = SuspendReceipt(gen.kv_size_mb, tuple(gen.token_ids))
        return receipt

    def resume(self, gen: GenerationState, now: float) -> float:
        if gen.status is not GenStatus.SUSPENDED:
            raise ValueError(f"request {gen.request_id} is not suspended")
        if self.model.kv_cache_disabled:
            cost = self.model.reprefill_ms
        elif gen.kv_location is KVLocation.HOST:
            cost = self.model.swap_restore_ms
        else:
            cost = 0.0
        if gen.kv_location is not KVLocation.GPU:
            self._make_room(gen.kv_size_mb, gen.request_id)
            gen.kv_location = KVLocation.GPU
        gen.status = GenStatus.RUNNING
        gen.suspended_at = None
        self.running.append(gen)
        self._pending_restore_ms += cost
        return cost

    def finish(self, gen: GenerationState) -> None:
        if gen in self.running:
            self.running.remove(gen)
        gen.status = GenStatus.FINISHED
        gen.kv_location = KVLocation.NONE
        self.contexts.pop(gen.request_id, None)

    # -- decoding -------------------------------------------------------

    def step_iteration(self, now: float) -> IterationResult:
        """Advance every running generation by one scripted token.

        The returned end time already includes prefill/restore lumps,
        detokenization, stop checks and suspension bookkeeping. Generations
        reaching a boundary stay in ``running``; the caller suspends or
        finishes them.
        """
        if not self.running:
            raise ValueError("step_iteration with an empty running batch")
        m = self.model
        batch = list(self.running)
        base = iteration_latency(m, batch)
        checking = self.stop_rule.kind is not StopKind.NONE
        per_tok = m.detok_ms_per_token + (m.stop_check_ms_per_token if checking else 0.0)
        base += per_tok * len(batch)
        emissions, boundaries = [], {}
        for g in batch:
            frag = g.next_fragment()
            b = check_segment_boundary(self.stop_rule, g, frag)
            tid = token_id(frag)
            g.token_ids.append(tid)
            g.text += frag
            g.pending_text += frag
            g.tokens_emitted_total += 1
            g.tokens_in_current_segment += 1
            g.prefilled = True
            if b is not None:
                if b.reason is not BoundaryReason.CAP:
                    done = g.items_completed()
                    done_text_len = sum(len(s.rendered) for s in g.trace.plan[:done])
                    g.pending_text = g.text[done_text_len:]
                boundaries[g.request_id] = b
                if self.suspend_at_boundaries and not b.end_of_plan:
                    base += m.context_save_ms
                elif not self.suspend_at_boundaries:
                    g.tokens_in_current_segment = 0
            emissions.append(
                TokenEmission(g.request_id, g.tokens_emitted_total - 1, frag, tid,
                              g.tokens_emitted_total == g.total_tokens)
            )
        restore = self._pending_restore_ms
        self._pending_restore_ms = 0.0
        latency = base + restore
        for g in batch:
            g.recent.append((latency, len(batch)))
        self.iteration_ms_total += base
        self.restore_ms_total += restore
        self.iterations += 1
        return IterationResult(now, now + latency / 1000.0, latency, restore, len(batch),
                               emissions, boundaries)

    def take_segment(self, gen: GenerationState) -> tuple[SkillCall, ...]:
        """Plan items completed since the last dispatch; marks them dispatched."""
        done = gen.items_completed()
        items = gen.trace.plan[gen.items_dispatched:done]
        gen.items_dispatched = done
        return tuple(items)

    def segment_text(self, items: Iterable[SkillCall]) -> str:
        return "".join(s.rendered for s in items)

    @property
    def pending_restore_ms(self) -> float:
        return self._pending_restore_ms

    @property
    def busy_ms(self) -> float:
        return self.iteration_ms_total + self.restore_ms_total
