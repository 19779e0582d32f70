"""Rate expressions of the secrecy capacity region (bits per channel use).

All rates carry the factor 1/2 of real-valued signalling and use base-2 logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import GainBounds, Partition

# negative secrecy terms beyond this are a contract violation, not round-off
_NEG_TOL = 1e-12


@dataclass(frozen=True)
class Weights:
    w0: float
    w1: float
    w2: float

    def __post_init__(self):
        for name in ("w0", "w1", "w2"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise ValueError(f"weight {name} must be finite and > 0, got {v}")

    def swapped(self) -> Weights:
        return Weights(self.w0, self.w2, self.w1)

    def scaled(self, c: float) -> Weights:
        return Weights(c * self.w0, c * self.w1, c * self.w2)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w0, self.w1, self.w2)


@dataclass(frozen=True)
class PowerAllocation:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    budget: float

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, k), dtype=float).ravel() for k in ("p0", "p1", "p2")]
        if len({a.size for a in arrs}) != 1:
            raise ValueError("p0, p1, p2 must have the same length")
        for k, a in zip(("p0", "p1", "p2"), arrs):
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{k} must be finite and nonnegative")
            object.__setattr__(self, k, a)
        if self.budget < 0:
            raise ValueError("budget must be >= 0")

    @property
    def L(self) -> int:
        return self.p0.size

    @property
    def total(self) -> float:
        return float(np.sum(self.p0) + np.sum(self.p1) + np.sum(self.p2))

    @classmethod
    def zeros(cls, L: int, budget: float = 0.0) -> PowerAllocation:
        z = np.zeros(L)
        return cls(z, z.copy(), z.copy(), budget)

    def swapped(self) -> PowerAllocation:
        return PowerAllocation(self.p0, self.p2, self.p1, self.budget)

    def is_feasible(self, rtol: float = 1e-9) -> bool:
        return self.total <= self.budget * (1.0 + rtol) + 1e-300


@dataclass(frozen=True)
class RateTriple:
    r0: float
    r1: float
    r2: float


def _log2_ratio(num, den):
    return np.log2(num) - np.log2(den)


def common_rate_user(bounds: GainBounds, p: PowerAllocation, user: int) -> float:
    """Rate at which ``user`` decodes the common message, confidential signals as noise."""
    a = bounds.alpha_minus[_row(user)]
    conf = p.p1 + p.p2
    terms = _log2_ratio(1.0 + a * (p.p0 + conf), 1.0 + a * conf)
    return 0.5 * float(np.sum(terms))


def common_rate(bounds: GainBounds, p: PowerAllocation) -> float:
    return min(common_rate_user(bounds, p, 1), common_rate_user(bounds, p, 2))


def confidential_rate(bounds: GainBounds, part: Partition, p: PowerAllocation, user: int) -> float:
    i = _row(user)
    own = part.s1 if user == 1 else part.s2
    power = (p.p1 if user == 1 else p.p2)[own]
    legit = bounds.alpha_minus[i, own]
    eaves = bounds.alpha_plus[1 - i, own]
    terms = _log2_ratio(1.0 + legit * power, 1.0 + eaves * power)
    if np.any(terms < -_NEG_TOL):
        raise ValueError(f"negative secrecy term for user {user}: bounds are inconsistent with the partition")
    return 0.5 * float(np.sum(np.maximum(terms, 0.0)))


def rate_triple(bounds: GainBounds, part: Partition, p: PowerAllocation) -> RateTriple:
    return RateTriple(common_rate(bounds, p),
                      confidential_rate(bounds, part, p, 1),
                      confidential_rate(bounds, part, p, 2))


def weighted_sum_rate(bounds: GainBounds, part: Partition, weights: Weights, p: PowerAllocation) -> float:
    r = rate_triple(bounds, part, p)
    return weights.w0 * r.r0 + weights.w1 * r.r1 + weights.w2 * r.r2


def wasted_confidential_power(part: Partition, p: PowerAllocation) -> dict[str, np.ndarray]:
    """Sub-channels carrying confidential power that cannot earn secrecy rate.

    Such power is legal input but only lowers the common rates.
    """
    m1, m2, _ = part.masks()
    return {"p1": np.flatnonzero((p.p1 > 0) & ~m1), "p2": np.flatnonzero((p.p2 > 0) & ~m2)}


def _row(user: int) -> int:
    if user not in (1, 2):
        raise ValueError(f"user must be 1 or 2, got {user}")
    return user - 1
