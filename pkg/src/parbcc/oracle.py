"""Brute-force and optimality checks for the closed-form allocator.

Nothing here calls into :mod:`parbcc.allocator`: the grid search evaluates
the rate expressions directly and the KKT report uses only the marginal
utilities of the Lagrangian.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .channel import GainBounds, Partition
from .rates import PowerAllocation, Weights

LN2 = math.log(2.0)


@dataclass(frozen=True)
class GridSpec:
    """Coarse simplex grid (``divisions`` steps of ``P/divisions``) plus local refinement."""

    divisions: int = 40
    levels: int = 3
    box: int = 2          # refinement half-width, in steps of the previous level
    factor: int = 10      # step shrink per level
    upper: float | None = None   # per-variable cap, defaults to P
    max_points: int = 3_000_000  # cap on one refinement box

    def __post_init__(self):
        if self.divisions < 1 or self.levels < 0 or self.box < 1 or self.factor < 2:
            raise ValueError("invalid grid specification")


class GridError(RuntimeError):
    pass


def _variables(part: Partition):
    """(kind, sub-channel) for every free variable: p0 everywhere, p1 on S1, p2 on S2."""
    out = [(0, l) for l in range(part.L)]
    out += [(1, int(l)) for l in part.s1]
    out += [(2, int(l)) for l in part.s2]
    return out


def _objective(bounds, part, weights, X, variables):
    """Weighted sum-rate for each row of ``X`` (rows are variable vectors)."""
    n, L = X.shape[0], part.L
    p = np.zeros((3, n, L))
    for k, (kind, l) in enumerate(variables):
        p[kind, :, l] = X[:, k]
    conf = p[1] + p[2]
    tot = p[0] + conf
    am, ap = bounds.alpha_minus, bounds.alpha_plus
    r01 = 0.5 * np.sum(np.log2(1 + am[0] * tot) - np.log2(1 + am[0] * conf), axis=1)
    r02 = 0.5 * np.sum(np.log2(1 + am[1] * tot) - np.log2(1 + am[1] * conf), axis=1)
    s1, s2 = part.s1, part.s2
    r1 = 0.5 * np.sum(np.log2(1 + am[0, s1] * p[1][:, s1]) - np.log2(1 + ap[1, s1] * p[1][:, s1]), axis=1)
    r2 = 0.5 * np.sum(np.log2(1 + am[1, s2] * p[2][:, s2]) - np.log2(1 + ap[0, s2] * p[2][:, s2]), axis=1)
    return weights.w0 * np.minimum(r01, r02) + weights.w1 * r1 + weights.w2 * r2


def _simplex_grid(d, n):
    """Integer points k >= 0 with sum(k) <= n, in lexicographic order."""
    pts = []
    # stars and bars with a slack coordinate
    for bars in itertools.combinations(range(n + d), d):
        prev, row = -1, []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        pts.append(row)
    pts = np.array(pts, dtype=float)
    return pts[np.lexsort(pts.T[::-1])]


def _best(bounds, part, weights, X, variables, chunk=400_000):
    best_val, best_x = -np.inf, None
    for s in range(0, X.shape[0], chunk):
        vals = _objective(bounds, part, weights, X[s:s + chunk], variables)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_x = float(vals[k]), X[s + k].copy()
    return best_x, best_val


def grid_search_optimum(bounds: GainBounds, part: Partition, weights: Weights, P: float,
                        grid: GridSpec | None = None):
    """Exhaustive search of the weighted sum-rate over the power simplex.

    Returns ``(PowerAllocation, objective, history)`` where ``history`` holds
    the incumbent objective after the coarse pass and each refinement level.
    """
    grid = grid or GridSpec()
    variables = _variables(part)
    d = len(variables)
    if P == 0:
        return PowerAllocation.zeros(part.L, 0.0), 0.0, [0.0]
    upper = P if grid.upper is None else min(grid.upper, P)
    step = P / grid.divisions
    X = _simplex_grid(d, grid.divisions) * step
    X = X[np.all(X <= upper + 1e-12, axis=1)]
    if X.shape[0] == 0:
        raise GridError("grid has no feasible point")
    x, val = _best(bounds, part, weights, X, variables)
    history = [val]
    for _ in range(grid.levels):
        # a level shrinks the step by `factor`; split it into sub-levels when the
        # full box would exceed max_points
        sub = grid.factor
        while sub > 2 and (2 * grid.box * sub + 1) ** d > grid.max_points:
            sub = max(2, sub // 2)
        shrink = 1.0
        while shrink < grid.factor * (1 - 1e-9):
            f = min(sub, grid.factor / shrink)
            new_step = step / f
            half = int(round(grid.box * f))
            offsets = np.arange(-half, half + 1) * new_step
            cand = np.stack(np.meshgrid(*([offsets] * d), indexing="ij"), axis=-1).reshape(-1, d) + x
            ok = (np.all(cand >= 0, axis=1) & np.all(cand <= upper, axis=1)
                  & (cand.sum(axis=1) <= P * (1 + 1e-12)))
            cx, cval = _best(bounds, part, weights, cand[ok], variables)
            if cval > val:
                x, val = cx, cval
            step, shrink = new_step, shrink * f
        history.append(val)
    p = np.zeros((3, part.L))
    for k, (kind, l) in enumerate(variables):
        p[kind, l] = x[k]
    return PowerAllocation(p[0], p[1], p[2], P), val, history


# --------------------------------------------------------------------------
# KKT report


@dataclass
class KKTReport:
    """Per-sub-channel residuals of the sub-problem optimality conditions.

    For a positive variable the residual is ``|gradient|`` (stationarity);
    for a zero variable it is ``max(gradient, 0)`` (no ascent direction).
    """

    common: np.ndarray
    confidential: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(max(np.max(self.common, initial=0.0), np.max(self.confidential, initial=0.0)))

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_residual <= tol


def common_marginal(bounds: GainBounds, weights: Weights, lam, mix, y):
    """Derivative of the weighted common-rate term w.r.t. total power ``y``, minus ``lam``.

    ``mix = (m1, m2)`` weights the two users' common rates: (1, 0) for the
    user-1 problem, (0, 1) for user 2, (mu, 1 - mu) for the balanced one.
    """
    am = bounds.alpha_minus
    c0 = weights.w0 / (2 * LN2)
    return c0 * (mix[0] * am[0] / (1 + am[0] * y) + mix[1] * am[1] / (1 + am[1] * y)) - lam


def confidential_marginal(bounds: GainBounds, weights: Weights, lam, user, x):
    i, j = user - 1, 2 - user
    a, b = bounds.alpha_minus[i], bounds.alpha_plus[j]
    ci = (weights.w1, weights.w2)[i] / (2 * LN2)
    return ci * (a / (1 + a * x) - b / (1 + b * x)) - lam


def kkt_residuals(bounds: GainBounds, part: Partition, weights: Weights, allocation: PowerAllocation,
                  lam: float | None, mu: float | None = None, leader: int | None = None) -> KKTReport:
    """Optimality residuals of ``allocation`` for the sub-problem with duals ``lam`` (and ``mu``).

    Give ``mu`` for the balanced problem, otherwise ``leader`` (1 or 2) for the
    problem whose common rate is measured at that user.
    """
    if lam is None:
        raise ValueError("KKT residuals need the power multiplier")
    if mu is None and leader not in (1, 2):
        raise ValueError("give mu (balanced problem) or leader in {1, 2}")
    mix = (mu, 1 - mu) if mu is not None else ((1.0, 0.0) if leader == 1 else (0.0, 1.0))
    m1, m2, _ = part.masks()
    p0, p1, p2 = allocation.p0, allocation.p1, allocation.p2
    x = np.where(m1, p1, np.where(m2, p2, 0.0))
    t = p0 + x
    u0_t = common_marginal(bounds, weights, lam, mix, t)
    u0_x = common_marginal(bounds, weights, lam, mix, x)
    g_conf = np.full(part.L, -np.inf)
    for user, m in ((1, m1), (2, m2)):
        ui = confidential_marginal(bounds, weights, lam, user, x)
        # moving power from the common layer into the confidential one
        g_conf = np.where(m, u0_t - u0_x + ui, g_conf)

    def residual(v, g):
        return np.where(v > 0, np.abs(g), np.maximum(g, 0.0))

    common = residual(p0, u0_t)
    conf = np.where(m1 | m2, residual(x, g_conf), 0.0)
    return KKTReport(common, conf)
