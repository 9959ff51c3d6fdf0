"""Time-utility functions.

A request carries a piecewise-linear utility curve: flat at ``beta`` until the
expected response time ``ert``, then falling with slope ``alpha``. Suspended
generations use the same curve anchored at zero waiting time, with negative
waiting clipped away.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeUtilityFunction:
    """Utility as a function of latency in seconds.

    Parameters
    ----------
    beta : float
        Utility while the request is on time.
    alpha : float
        Utility lost per second past ``ert``. Must be <= 0.
    ert : float
        Expected response time (deadline), seconds.
    """

    beta: float
    alpha: float
    ert: float

    def __post_init__(self):
        if not math.isfinite(self.beta):
            raise ValueError(f"beta must be finite, got {self.beta!r}")
        if not math.isfinite(self.alpha) or self.alpha > 0:
            raise ValueError(f"alpha must be finite and <= 0, got {self.alpha!r}")
        if not math.isfinite(self.ert) or self.ert < 0:
            raise ValueError(f"ert must be finite and >= 0, got {self.ert!r}")

    @classmethod
    def unchecked(cls, beta: float, alpha: float, ert: float) -> "TimeUtilityFunction":
        """Build without validation. Test fixtures use this for increasing curves."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "beta", float(beta))
        object.__setattr__(obj, "alpha", float(alpha))
        object.__setattr__(obj, "ert", float(ert))
        return obj

    @property
    def is_monotone(self) -> bool:
        return self.alpha <= 0

    def __call__(self, t: float) -> float:
        return eval_tuf(self, t)

    def suspended(self, t: float) -> float:
        return eval_tuf_suspended(self, t)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "alpha": self.alpha, "ert_s": self.ert}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeUtilityFunction":
        return cls(float(d["beta"]), float(d["alpha"]), float(d["ert_s"]))


def eval_tuf(f: TimeUtilityFunction, t: float) -> float:
    """``min(beta, alpha * (t - ert) + beta)``; equals ``beta`` for ``t <= ert``."""
    return min(f.beta, f.alpha * (t - f.ert) + f.beta)


def eval_tuf_suspended(f: TimeUtilityFunction, t: float) -> float:
    """Utility of a follow-up segment that waited ``t`` seconds.

    The deadline sits at zero waiting and negative waiting counts as zero, so
    ``ert`` of ``f`` is ignored.
    """
    return min(f.beta, f.alpha * max(t, 0.0) + f.beta)


class Urgency(str, enum.Enum):
    NORMAL = "Normal"
    URGENT = "Urgent"


NORMAL_TUF = TimeUtilityFunction(beta=1.0, alpha=-2.0, ert=1.0)
# alpha is kept as published (-6.67) rather than -2/0.3
URGENT_TUF = TimeUtilityFunction(beta=2.0, alpha=-6.67, ert=0.2)


@dataclass(frozen=True)
class UrgencyClass:
    kind: Urgency
    tuf: TimeUtilityFunction

    @classmethod
    def normal(cls) -> "UrgencyClass":
        return cls(Urgency.NORMAL, NORMAL_TUF)

    @classmethod
    def urgent(cls) -> "UrgencyClass":
        return cls(Urgency.URGENT, URGENT_TUF)

    @classmethod
    def from_dict(cls, d) -> "UrgencyClass":
        # accepts "Normal" / "Urgent" or {"kind": ..., "tuf": {...}}
        if isinstance(d, str):
            kind = Urgency(d)
            return cls(kind, NORMAL_TUF if kind is Urgency.NORMAL else URGENT_TUF)
        kind = Urgency(d["kind"])
        if "tuf" in d:
            return cls(kind, TimeUtilityFunction.from_dict(d["tuf"]))
        return cls.from_dict(kind.value)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "tuf": self.tuf.to_dict()}


def eval_tuf_array(f: TimeUtilityFunction, t):
    """Vectorised :func:`eval_tuf` over a numpy array of latencies."""
    t = np.asarray(t, dtype=float)
    return np.minimum(f.beta, f.alpha * (t - f.ert) + f.beta)


def eval_tuf_suspended_array(f: TimeUtilityFunction, t):
    """Vectorised :func:`eval_tuf_suspended`."""
    t = np.asarray(t, dtype=float)
    return np.minimum(f.beta, f.alpha * np.maximum(t, 0.0) + f.beta)
