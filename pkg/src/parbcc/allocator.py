"""Closed-form weighted sum-rate power allocation.

The max-min objective ``w0 min(R01, R02) + w1 R1 + w2 R2`` is handled by
three concave sub-problems:

* P1: common rate measured at user 1 only,
* P2: the same with user indices swapped,
* P3: common rate ``mu R01 + (1 - mu) R02`` with ``mu`` tuned so that
  ``R01 = R02`` at the optimum.

For fixed Lagrange multiplier ``lam`` (and ``mu``) every sub-channel has a
closed-form solution built from the roots of the marginal-utility curves and
their intersections; ``lam`` and ``mu`` are then found by bracketing searches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import GainBounds, Partition
from .rates import PowerAllocation, RateTriple, Weights, common_rate_user, rate_triple

LN2 = math.log(2.0)


class BracketError(RuntimeError):
    """A dual search could not bracket its target."""


@dataclass(frozen=True)
class DualState:
    lam: float
    mu: float | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.mu is not None and not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")


@dataclass(frozen=True)
class SolverConfig:
    lambda_tol: float = 1e-10   # relative error on the total power
    mu_tol: float = 1e-6        # |R01 - R02| in bits
    max_iters: int = 200
    bracket_growth: float = 2.0
    # Denominator of the P1 threshold on the follower's set: "lower" uses
    # alpha-_follower - alpha+_leader, "upper" alpha+_follower - alpha+_leader.
    s2_threshold: str = "lower"

    def __post_init__(self):
        if self.lambda_tol <= 0 or self.mu_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.bracket_growth <= 1:
            raise ValueError("bracket_growth must be > 1")
        if self.s2_threshold not in ("lower", "upper"):
            raise ValueError(f"unknown s2_threshold {self.s2_threshold!r}")


@dataclass(frozen=True)
class HelperTerms:
    """Per-sub-channel helper quantities for one user ``i`` (other user ``j``).

    Entries are evaluated on every sub-channel; they are only meaningful on
    the sub-channels where the corresponding branch applies.  ``nu``,
    ``big_lambda`` and ``xi`` are ``None`` without ``mu``.
    """

    delta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    big_delta: np.ndarray
    theta: np.ndarray
    nu: np.ndarray | None = None
    big_lambda: np.ndarray | None = None
    big_lambda_printed: np.ndarray | None = None
    xi: np.ndarray | None = None


def _check_gains(bounds: GainBounds):
    if np.any(bounds.alpha_minus <= 0) or np.any(bounds.alpha_plus <= 0):
        raise ValueError("closed forms divide by the gains; all alpha must be > 0")


class _UserTerms:
    """lambda-independent pieces for user ``i``; ``mu`` is user 1's common weight."""

    def __init__(self, bounds: GainBounds, weights: Weights, user: int, mu: float | None = None):
        i, j = user - 1, 2 - user
        am, ap = bounds.alpha_minus, bounds.alpha_plus
        self.a_own = am[i]
        self.a_eve = ap[j]
        self.a_other = am[j]
        self.A = 1.0 / am[i]        # 1/alpha-_i
        self.B = 1.0 / ap[j]        # 1/alpha+_j
        self.C = 1.0 / am[j]        # 1/alpha-_j
        self.w0 = weights.w0
        self.wi = (weights.w1, weights.w2)[i]
        self.r = self.wi / self.w0
        self.delta = self.B - self.A
        d, r = self.delta, self.r
        A, B, C = self.A, self.B, self.C
        # expanded form of [r^2 + 2r(2C - A - B)/delta + 1] delta^2, safe at delta = 0
        self.big_delta = r * r * d * d + 2.0 * r * d * (2.0 * C - A - B) + d * d
        with np.errstate(invalid="ignore"):
            self.theta = 0.5 * (r * d - (B + A) + np.sqrt(self.big_delta))
        self.zeta = r * d - B
        self.mu_i = None
        if mu is not None:
            mu_i = mu if user == 1 else 1.0 - mu
            mu_j = 1.0 - mu_i
            self.mu_i, self.mu_j = mu_i, mu_j
            cross = 2.0 * r * d * ((2.0 - mu_i) * C - mu_j * A - B)
            # square completes to (mu_i (C - A) - delta)^2; see big_lambda_printed for
            # the variant with (B - C) in the last bracket, which does not vanish the
            # discriminant of the intersection quadratic
            self.big_lambda = r * r * d * d + cross + (mu_i * (C - A) - d) ** 2
            self.big_lambda_printed = (r * r * d * d + cross + d * d
                                       + mu_i * (C - A) * (mu_i * (C - A) - 2.0 * (B - C)))
            with np.errstate(invalid="ignore"):
                self.xi = 0.5 * (r * d - (B + A) - mu_i * (C - A) + np.sqrt(self.big_lambda))

    def beta(self, lam):
        d = self.delta
        with np.errstate(invalid="ignore"):
            b = 0.5 * np.sqrt(d * (d + 2.0 * self.wi / (lam * LN2))) - 0.5 * (self.B + self.A)
        # no secrecy advantage: the confidential curve never rises above zero
        return np.where(d > 0, b, -np.inf)

    def gamma(self, lam):
        return self.w0 / (2.0 * lam * LN2) - self.A

    def nu(self, lam):
        """Root of the mu-mixed common marginal utility, as a closed form.

        Cross-checked against a numerically stable solution of the same
        quadratic; returns (nu, n_overridden).
        """
        K = self.w0 / (2.0 * lam * LN2)
        A, C, mu_i = self.A, self.C, self.mu_i
        printed = (0.5 * np.sqrt((C - A - K) ** 2 + 4.0 * K * mu_i * (C - A))
                   - 0.5 * (C + A - K))
        root = _mixed_common_root(A, C, K, mu_i)
        bad = np.abs(printed - root) > 1e-6 * np.maximum(1.0, np.abs(root))
        return np.where(bad, root, printed), int(np.count_nonzero(bad))


def _mixed_common_root(A, C, K, mu_i):
    """Larger root of y^2 + (A + C - K) y + AC - K(mu_i C + (1 - mu_i) A) = 0."""
    b = A + C - K
    c = A * C - K * (mu_i * C + (1.0 - mu_i) * A)
    disc = np.sqrt(np.maximum(b * b - 4.0 * c, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        stable = np.where(b > 0, -2.0 * c / (b + disc), 0.5 * (-b + disc))
    return stable


def helper_terms(bounds: GainBounds, weights: Weights, dual: DualState, user: int) -> HelperTerms:
    if user not in (1, 2):
        raise ValueError(f"user must be 1 or 2, got {user}")
    if not dual.lam > 0:
        raise ValueError("helper terms divide by lambda; need lambda > 0")
    _check_gains(bounds)
    t = _UserTerms(bounds, weights, user, dual.mu)
    nu = t.nu(dual.lam)[0] if dual.mu is not None else None
    return HelperTerms(
        delta=t.delta, beta=t.beta(dual.lam), gamma=t.gamma(dual.lam), zeta=t.zeta,
        big_delta=t.big_delta, theta=t.theta, nu=nu,
        big_lambda=getattr(t, "big_lambda", None),
        big_lambda_printed=getattr(t, "big_lambda_printed", None),
        xi=getattr(t, "xi", None),
    )


def _pos(x):
    return np.maximum(x, 0.0)


class _P1Form:
    """P1 closed form with ``leader`` as the user whose common rate counts."""

    def __init__(self, bounds, part, weights, leader=1, s2_threshold="lower"):
        _check_gains(bounds)
        self.leader = leader
        if leader == 2:
            bounds, part, weights = bounds.swapped(), part.swapped(), weights.swapped()
        self.L = bounds.L
        m1, m2, _ = part.masks()
        self.m1, self.m2 = m1, m2
        self.t1 = _UserTerms(bounds, weights, 1)
        self.t2 = _UserTerms(bounds, weights, 2)
        am, ap = bounds.alpha_minus, bounds.alpha_plus
        # own set: zeta > 0 exactly when w1/w0 > a1-/(a1- - a2+)
        with np.errstate(divide="ignore", invalid="ignore"):
            thr1 = am[0] / (am[0] - ap[1])
            den = (am[1] - ap[0]) if s2_threshold == "lower" else (ap[1] - ap[0])
            thr2 = am[0] / den
        self.conf1 = m1 & (self.t1.r > thr1) & (am[0] > ap[1])
        self.conf2 = m2 & (self.t2.r > thr2) & (den > 0)
        bad = self.conf2 & ~(self.t2.big_delta >= 0)
        self.theta_fallbacks = int(np.count_nonzero(bad))
        self.conf2 &= ~bad

    def __call__(self, lam):
        g = self.t1.gamma(lam)
        p0 = _pos(g)
        p1 = np.zeros(self.L)
        p2 = np.zeros(self.L)
        if self.conf1.any():
            c = self.conf1
            z = self.t1.zeta[c]
            p0[c] = _pos(g[c] - z)
            p1[c] = _pos(np.minimum(self.t1.beta(lam)[c], z))
        if self.conf2.any():
            c = self.conf2
            th = self.t2.theta[c]
            p0[c] = _pos(g[c] - th)
            p2[c] = _pos(np.minimum(self.t2.beta(lam)[c], th))
        if self.leader == 2:
            p1, p2 = p2, p1
        return p0, p1, p2


def _lambda_zero_tol(t: _UserTerms):
    scale = (t.r * t.delta) ** 2 + t.delta ** 2 + (t.mu_i * (t.C - t.A)) ** 2
    return 1e-12 * np.maximum(1.0, scale)


class _P3Form:
    def __init__(self, bounds, part, weights, mu):
        _check_gains(bounds)
        if not 0.0 <= mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {mu}")
        self.L = bounds.L
        self.mu = mu
        m1, m2, m3 = part.masks()
        self.m3 = m3
        self.terms = (_UserTerms(bounds, weights, 1, mu), _UserTerms(bounds, weights, 2, mu))
        self.branches = []
        for t, m in zip(self.terms, (m1, m2)):
            tol = _lambda_zero_tol(t)
            lam_pos = t.big_lambda > tol
            lam_zero = np.abs(t.big_lambda) <= tol
            lam_neg = t.big_lambda < -tol
            with np.errstate(divide="ignore", invalid="ignore"):
                gap = t.a_own - t.a_eve
                thr = (t.mu_i * t.a_own + t.mu_j * t.a_other) / gap
                thr0 = (t.a_own + t.mu_j * t.a_eve + t.mu_i * t.a_own * t.a_eve / t.a_other) / gap
            ok = m & (gap > 0)
            self.branches.append({
                # (p0, p_i) = ([nu - xi]+, [min(beta, xi)]+)
                "split": ok & ((lam_pos & (t.r > thr)) | (lam_zero & (t.r > thr0))),
                # (0, [beta]+)
                "conf_only": ok & lam_neg & (t.r > thr),
            })

    def __call__(self, lam):
        nu, overrides = self.terms[0].nu(lam)
        self.nu_overrides = overrides
        p0 = _pos(nu)
        conf = [np.zeros(self.L), np.zeros(self.L)]
        for k, (t, br) in enumerate(zip(self.terms, self.branches)):
            split, only = br["split"], br["conf_only"]
            if split.any() or only.any():
                beta = t.beta(lam)
            if split.any():
                xi = t.xi[split]
                p0[split] = _pos(nu[split] - xi)
                conf[k][split] = _pos(np.minimum(beta[split], xi))
            if only.any():
                p0[only] = 0.0
                conf[k][only] = _pos(beta[only])
        return p0, conf[0], conf[1]


def solve_p1_at_lambda(bounds: GainBounds, part: Partition, weights: Weights, lam: float,
                       user_order: tuple[int, int] = (1, 2), s2_threshold: str = "lower"):
    """P1 (``user_order=(1, 2)``) or P2 (``(2, 1)``) allocation at a fixed multiplier.

    Returns ``(p0, p1, p2)`` arrays.
    """
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    if tuple(user_order) not in ((1, 2), (2, 1)):
        raise ValueError(f"user_order must be (1, 2) or (2, 1), got {user_order}")
    return _P1Form(bounds, part, weights, user_order[0], s2_threshold)(lam)


def solve_p3_at_lambda_mu(bounds: GainBounds, part: Partition, weights: Weights, lam: float, mu: float):
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    return _P3Form(bounds, part, weights, mu)(lam)


# --------------------------------------------------------------------------
# dual searches


def _root_decreasing(f, lo, hi, f_lo, f_hi, ftol, max_iters):
    """Illinois false position on a bracket of a nonincreasing ``f``.

    ``f_lo > 0 > f_hi`` on entry.  Returns ``(x, f(x), iterations)`` once
    ``|f(x)| <= ftol``; falls back to plain bisection when the secant step
    stalls.
    """
    if abs(f_lo) <= ftol:
        return lo, f_lo, 0
    if abs(f_hi) <= ftol:
        return hi, f_hi, 0
    side = 0
    for it in range(1, max_iters + 1):
        x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo)
        if not lo < x < hi or it % 8 == 0:
            x = 0.5 * (lo + hi)
        fx = f(x)
        if abs(fx) <= ftol:
            return x, fx, it
        if fx > 0:
            lo, f_lo = x, fx
            if side == +1:
                f_hi *= 0.5
            side = +1
        else:
            hi, f_hi = x, fx
            if side == -1:
                f_lo *= 0.5
            side = -1
        if hi - lo <= 4e-16 * max(abs(lo), abs(hi), 1e-300):
            return x, fx, it
    raise BracketError(f"no convergence in {max_iters} iterations; last bracket [{lo!r}, {hi!r}]")


def _lambda_cap(bounds: GainBounds, weights: Weights) -> float:
    am = bounds.alpha_minus
    wi = np.array([[weights.w1], [weights.w2]])
    return float(np.max((weights.w0 * am + wi * am) / (2.0 * LN2)))


def _make_form(problem, bounds, part, weights, mu, cfg):
    if problem in ("P1", 1):
        return _P1Form(bounds, part, weights, 1, cfg.s2_threshold)
    if problem in ("P2", 2):
        return _P1Form(bounds, part, weights, 2, cfg.s2_threshold)
    if problem in ("P3", 3):
        if mu is None:
            raise ValueError("P3 needs mu")
        return _P3Form(bounds, part, weights, mu)
    raise ValueError(f"unknown problem {problem!r}")


@dataclass
class LambdaResult:
    lam: float
    allocation: PowerAllocation
    iterations: int
    form: object = field(repr=False, default=None)


def _search_lambda_form(form, bounds, weights, P, cfg, lam_guess=None) -> LambdaResult:
    def power(lam):
        return float(sum(np.sum(x) for x in form(lam)))

    hi = _lambda_cap(bounds, weights)
    lo = hi * 2.0 ** -40
    if lam_guess is not None and lo < lam_guess < hi:
        # warm start: shrink the bracket around the previous multiplier
        g_lo, g_hi = lam_guess / 4.0, lam_guess * 4.0
        if g_lo > lo and power(g_lo) > P:
            lo = g_lo
        if g_hi < hi and power(g_hi) < P:
            hi = g_hi
    iters = 0
    while power(hi) > P:
        iters += 1
        if iters > cfg.max_iters:
            raise BracketError(f"power still above budget at lambda={hi!r}")
        hi *= cfg.bracket_growth
    while power(lo) < P:
        iters += 1
        if iters > cfg.max_iters:
            # total power saturates below P even as lambda -> 0+
            return LambdaResult(lo, PowerAllocation(*form(lo), P), iters, form)
        lo /= cfg.bracket_growth

    def f(x):
        return power(math.exp(x)) - P

    x_lo, x_hi = math.log(lo), math.log(hi)
    x, _, n = _root_decreasing(f, x_lo, x_hi, f(x_lo), f(x_hi), cfg.lambda_tol * P, cfg.max_iters)
    lam = math.exp(x)
    return LambdaResult(lam, PowerAllocation(*form(lam), P), iters + n, form)


def search_lambda(problem, bounds: GainBounds, part: Partition, weights: Weights, P: float,
                  mu: float | None = None, cfg: SolverConfig | None = None):
    """Find the multiplier that makes the sub-problem spend exactly ``P``.

    Returns ``(lam, allocation)``.
    """
    cfg = cfg or SolverConfig()
    if not P > 0:
        raise ValueError("P must be > 0")
    form = _make_form(problem, bounds, part, weights, mu, cfg)
    res = _search_lambda_form(form, bounds, weights, P, cfg)
    return res.lam, res.allocation


def _common_gap(bounds, p):
    return common_rate_user(bounds, p, 1) - common_rate_user(bounds, p, 2)


@dataclass
class MuResult:
    mu: float
    lam: float
    allocation: PowerAllocation
    gap: float
    iterations: int
    lambda_iterations: int
    nu_overrides: int


def _search_mu(bounds, part, weights, P, cfg, g_at_0=None, g_at_1=None) -> MuResult:
    state = {"lam": None, "lam_iters": 0, "nu": 0}
    cache = {}

    def solve(mu):
        form = _P3Form(bounds, part, weights, mu)
        res = _search_lambda_form(form, bounds, weights, P, cfg, state["lam"])
        state["lam"] = res.lam
        state["lam_iters"] += res.iterations
        state["nu"] += getattr(form, "nu_overrides", 0)
        cache[mu] = (res, _common_gap(bounds, res.allocation))
        return cache[mu][1]

    def done(mu, iters):
        res, g = cache[mu]
        return MuResult(mu, res.lam, res.allocation, g, iters, state["lam_iters"], state["nu"])

    tol = cfg.mu_tol
    g0 = solve(0.0) if g_at_0 is None else g_at_0
    g1 = solve(1.0) if g_at_1 is None else g_at_1
    if g0 > tol or g1 < -tol:
        raise BracketError(f"R01 - R02 does not change sign on (0, 1): g(0)={g0:.3e}, g(1)={g1:.3e}")
    # both endpoints tied: g is flat, prefer the symmetric point
    if abs(g0) <= tol and abs(g1) <= tol and abs(solve(0.5)) <= tol:
        return done(0.5, 1)
    # endpoints inside the tie band: step just inside (0, 1)
    for mu_end, g_end in ((1.0 - 1e-12, g1), (1e-12, g0)):
        if abs(g_end) <= tol:
            if abs(solve(mu_end)) <= tol:
                return done(mu_end, 1)
    x, _, n = _root_decreasing(lambda m: -solve(m), 0.0, 1.0, -g0, -g1, tol, cfg.max_iters)
    return done(x, n)


def search_mu(bounds: GainBounds, part: Partition, weights: Weights, P: float,
              cfg: SolverConfig | None = None):
    """Balance the two common rates through ``mu``; returns ``(mu, lam, allocation)``."""
    cfg = cfg or SolverConfig()
    if not P > 0:
        raise ValueError("P must be > 0")
    r = _search_mu(bounds, part, weights, P, cfg)
    return r.mu, r.lam, r.allocation


@dataclass
class Diagnostics:
    step: int
    lam: float
    mu: float | None
    lambda_iterations: int = 0
    mu_iterations: int = 0
    gap_p1: float | None = None
    gap_p2: float | None = None
    gap: float = 0.0
    theta_fallbacks: int = 0
    nu_overrides: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AllocationResult:
    allocation: PowerAllocation
    rates: RateTriple
    diagnostics: Diagnostics


def allocate(bounds: GainBounds, part: Partition, weights: Weights, P: float,
             cfg: SolverConfig | None = None) -> AllocationResult:
    """Optimal allocation for the weighted sum-rate via the three-step selection.

    Step 1 keeps the P1 solution if user 1 is the common-rate bottleneck
    there, Step 2 the P2 solution if user 2 is, and Step 3 otherwise solves P3
    with the balancing ``mu``.  Gaps within ``mu_tol`` count as ties and go to
    Step 3.
    """
    cfg = cfg or SolverConfig()
    _check_gains(bounds)
    if P < 0:
        raise ValueError("P must be >= 0")
    if P == 0:
        zero = PowerAllocation.zeros(bounds.L, 0.0)
        diag = Diagnostics(step=3, lam=_lambda_cap(bounds, weights), mu=0.5)
        return AllocationResult(zero, RateTriple(0.0, 0.0, 0.0), diag)
    tol = cfg.mu_tol
    lam_iters = 0

    r1 = _search_lambda_form(_make_form("P1", bounds, part, weights, None, cfg), bounds, weights, P, cfg)
    lam_iters += r1.iterations
    g1 = _common_gap(bounds, r1.allocation)
    fallbacks = r1.form.theta_fallbacks
    if g1 < -tol:
        diag = Diagnostics(1, r1.lam, None, lam_iters, 0, g1, None, g1, fallbacks)
        return AllocationResult(r1.allocation, rate_triple(bounds, part, r1.allocation), diag)

    r2 = _search_lambda_form(_make_form("P2", bounds, part, weights, None, cfg), bounds, weights, P, cfg)
    lam_iters += r2.iterations
    g2 = _common_gap(bounds, r2.allocation)
    fallbacks += r2.form.theta_fallbacks
    if g2 > tol:
        diag = Diagnostics(2, r2.lam, None, lam_iters, 0, g1, g2, g2, fallbacks)
        return AllocationResult(r2.allocation, rate_triple(bounds, part, r2.allocation), diag)

    # P3 at mu = 1 / mu = 0 coincides with P1 / P2
    m = _search_mu(bounds, part, weights, P, cfg, g_at_0=g2, g_at_1=g1)
    diag = Diagnostics(3, m.lam, m.mu, lam_iters + m.lambda_iterations, m.iterations,
                       g1, g2, m.gap, fallbacks, m.nu_overrides)
    return AllocationResult(m.allocation, rate_triple(bounds, part, m.allocation), diag)
