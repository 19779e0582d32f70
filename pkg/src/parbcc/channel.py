"""Channel priors, noisy estimation, margin bounds and sub-channel partition.

Channel coefficients are real zero-mean Gaussian with per-sub-channel variance
(the average SNR), so power gains are exponential.  The transmitter sees
``h_hat = h + eta`` with ``eta ~ N(0, sigma^2)`` and guards against the
estimation error with epsilon-quantile bounds on the gain ``alpha = h^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def _gauss(x, var):
    return np.exp(-0.5 * x * x / var) / (SQRT_2PI * np.sqrt(var))


@dataclass(frozen=True)
class ChannelPrior:
    """Per-user, per-sub-channel variance of the channel coefficient.

    ``variance`` has shape (2, L); row ``i`` holds user ``i+1``.
    """

    variance: np.ndarray

    def __post_init__(self):
        var = np.atleast_2d(np.asarray(self.variance, dtype=float))
        if var.ndim != 2 or var.shape[0] != 2:
            raise ValueError(f"variance must have shape (2, L), got {var.shape}")
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("prior variances must be finite and strictly positive")
        object.__setattr__(self, "variance", var)

    @property
    def L(self) -> int:
        return self.variance.shape[1]

    @classmethod
    def from_snr_db(cls, snr1_db: float, snr2_db: float, L: int) -> ChannelPrior:
        snr = db_to_linear([snr1_db, snr2_db])
        return cls(np.repeat(snr[:, None], L, axis=1))


@dataclass(frozen=True)
class EstimationModel:
    sigma: float = 0.0
    epsilon: float = 0.05

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not (0.0 <= self.epsilon < 0.5):
            raise ValueError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")

    @property
    def perfect(self) -> bool:
        return self.sigma == 0.0


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray
    h_hat: np.ndarray


@dataclass(frozen=True)
class GainBounds:
    """Lower/upper channel power gains, both of shape (2, L)."""

    alpha_minus: np.ndarray
    alpha_plus: np.ndarray

    def __post_init__(self):
        am = np.atleast_2d(np.asarray(self.alpha_minus, dtype=float))
        ap = np.atleast_2d(np.asarray(self.alpha_plus, dtype=float))
        if am.shape != ap.shape or am.ndim != 2 or am.shape[0] != 2:
            raise ValueError(f"bounds must both have shape (2, L); got {am.shape}, {ap.shape}")
        if not (np.all(np.isfinite(am)) and np.all(np.isfinite(ap))):
            raise ValueError("gain bounds must be finite")
        if np.any(am < 0) or np.any(am > ap):
            raise ValueError("gain bounds must satisfy 0 <= alpha_minus <= alpha_plus")
        object.__setattr__(self, "alpha_minus", am)
        object.__setattr__(self, "alpha_plus", ap)

    @property
    def L(self) -> int:
        return self.alpha_minus.shape[1]

    @classmethod
    def perfect(cls, alpha) -> GainBounds:
        a = np.atleast_2d(np.asarray(alpha, dtype=float))
        return cls(a, a.copy())

    def swapped(self) -> GainBounds:
        """Same bounds with the user indices exchanged."""
        return GainBounds(self.alpha_minus[::-1].copy(), self.alpha_plus[::-1].copy())


@dataclass(frozen=True)
class Partition:
    """Index sets (0-based sub-channel indices) by secrecy advantage."""

    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    L: int

    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = np.zeros((3, self.L), dtype=bool)
        m[0, self.s1] = True
        m[1, self.s2] = True
        m[2, self.s3] = True
        return m[0], m[1], m[2]

    def swapped(self) -> Partition:
        return Partition(self.s2, self.s1, self.s3, self.L)


# --------------------------------------------------------------------------
# conditional gain distribution


def _check_density_args(prior_var, sigma):
    if sigma <= 0:
        raise ValueError("conditional gain density needs sigma > 0; "
                         "with sigma = 0 the gain is the point mass h_hat**2")
    if prior_var <= 0:
        raise ValueError("prior variance must be > 0")


def conditional_gain_density(prior_var: float, sigma: float, h_hat: float, a):
    """Density of the gain ``alpha = h^2`` given the estimate ``h_hat``.

    Bayes with a Gaussian prior on ``h`` (variance ``prior_var``) and Gaussian
    estimation noise (std ``sigma``); the two square-root branches
    ``h = +-sqrt(a)`` are summed and normalised by the convolution of the
    prior with the noise density evaluated at ``h_hat``.  Diverges like
    ``a**-0.5`` at the origin, which is integrable.
    """
    _check_density_args(prior_var, sigma)
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("gain argument must be >= 0")
    s2 = sigma * sigma
    r = np.sqrt(a)
    num = _gauss(h_hat - r, s2) * _gauss(r, prior_var) + _gauss(h_hat + r, s2) * _gauss(-r, prior_var)
    den = 2.0 * r * _gauss(h_hat, prior_var + s2)
    with np.errstate(divide="ignore"):
        out = num / den
    return out if out.ndim else float(out)


def _posterior_moments(prior_var, sigma, h_hat):
    s2 = sigma * sigma
    mean = h_hat * prior_var / (prior_var + s2)
    std = np.sqrt(prior_var * s2 / (prior_var + s2))
    return mean, std


def conditional_gain_cdf(prior_var, sigma, h_hat, a):
    """P(alpha <= a | h_hat), vectorised over all arguments.

    Integrating the density after substituting ``a = t^2`` removes the
    singularity and leaves the two Gaussian branches ``f_eta(h_hat -+ t)
    f_h(+-t) / f_conv(h_hat)``; each is a Gaussian in ``t`` whose integral is a
    normal CDF, so no numerical quadrature is needed here.
    """
    mean, std = _posterior_moments(prior_var, sigma, h_hat)
    r = np.sqrt(np.maximum(np.asarray(a, dtype=float), 0.0))
    return ndtr((r - mean) / std) - ndtr((-r - mean) / std)


def _adaptive_simpson(f, lo, hi, tol, depth=50):
    def simpson(a, fa, b, fb):
        m = 0.5 * (a + b)
        fm = f(m)
        return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, b, fb, m, fm, whole, tol, depth):
        lm, flm, left = simpson(a, fa, m, fm)
        rm, frm, right = simpson(m, fm, b, fb)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return (recurse(a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
                + recurse(m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1))

    fa, fb = f(lo), f(hi)
    m, fm, whole = simpson(lo, fa, hi, fb)
    return recurse(lo, fa, hi, fb, m, fm, whole, tol, depth)


def conditional_gain_cdf_quadrature(prior_var: float, sigma: float, h_hat: float,
                                    a: float, tol: float = 1e-12) -> float:
    """Same CDF as :func:`conditional_gain_cdf`, by adaptive Simpson on the density.

    Uses ``a = t^2`` so the integrand ``2 t f(t^2)`` is smooth at the origin.
    Slow; kept as an independent numerical route.
    """
    _check_density_args(prior_var, sigma)
    if a <= 0:
        return 0.0
    s2 = sigma * sigma
    conv = _gauss(h_hat, prior_var + s2)

    def integrand(t):
        return float((_gauss(h_hat - t, s2) * _gauss(t, prior_var)
                      + _gauss(h_hat + t, s2) * _gauss(-t, prior_var)) / conv)

    # split at the posterior bulk so the adaptive rule sees the peak
    mean, std = _posterior_moments(prior_var, sigma, h_hat)
    top = math.sqrt(a)
    knots = sorted({0.0, top, *[min(top, max(0.0, abs(mean) + k * std)) for k in (-8, -2, 0, 2, 8)]})
    return sum(_adaptive_simpson(integrand, x0, x1, tol) for x0, x1 in zip(knots, knots[1:]) if x1 > x0)


def _cdf_bisect(prior_var, sigma, h_hat, target, side, prob_tol=1e-8, max_iter=200):
    """Vectorised bisection on t = sqrt(a) for CDF(t^2) = target.

    ``side='lower'`` returns the bracket end with CDF <= target,
    ``side='upper'`` the end with CDF >= target.
    """
    mean, std = _posterior_moments(prior_var, sigma, h_hat)
    lo = np.zeros_like(mean)
    hi = np.abs(mean) + 40.0 * std + 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = conditional_gain_cdf(prior_var, sigma, h_hat, mid * mid) <= target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        gap = (conditional_gain_cdf(prior_var, sigma, h_hat, hi * hi)
               - conditional_gain_cdf(prior_var, sigma, h_hat, lo * lo))
        if np.all(gap <= prob_tol) or np.all(hi - lo <= 1e-15 * np.maximum(hi, 1e-300)):
            break
    t = lo if side == "lower" else hi
    return t * t


def gain_bounds(prior: ChannelPrior, model: EstimationModel, h_hat) -> GainBounds:
    """Epsilon-quantile margin bounds on the gains given the estimates.

    ``alpha_minus`` is the largest ``a`` with ``P(alpha < a) <= eps`` and
    ``alpha_plus`` the smallest with ``P(alpha > a) <= eps``, both up to the
    1e-8 probability tolerance of the bisection (resolved conservatively).
    """
    h_hat = np.atleast_2d(np.asarray(h_hat, dtype=float))
    if h_hat.shape != prior.variance.shape:
        raise ValueError(f"h_hat shape {h_hat.shape} does not match prior {prior.variance.shape}")
    if not np.all(np.isfinite(h_hat)):
        raise ValueError("channel estimates must be finite")
    if model.perfect:
        g = h_hat * h_hat
        return GainBounds(g, g.copy())
    if model.epsilon <= 0:
        raise ValueError("epsilon must be > 0 when sigma > 0 (quantiles would be 0 / infinite)")
    var = prior.variance
    lower = _cdf_bisect(var, model.sigma, h_hat, model.epsilon, "lower")
    upper = _cdf_bisect(var, model.sigma, h_hat, 1.0 - model.epsilon, "upper")
    return GainBounds(lower, upper)


def sample_realization(prior: ChannelPrior, model: EstimationModel, seed) -> ChannelRealization:
    """Draw true coefficients and their noisy estimates; ``seed`` fixes everything.

    ``seed`` may be an int or a sequence of ints (e.g. ``(master, trial)``).
    """
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(prior.variance.shape) * np.sqrt(prior.variance)
    noise = rng.standard_normal(h.shape)
    h_hat = h + model.sigma * noise if model.sigma > 0 else h.copy()
    return ChannelRealization(h, h_hat)


def partition(bounds: GainBounds) -> Partition:
    am, ap = bounds.alpha_minus, bounds.alpha_plus
    in1 = am[0] > ap[1]
    in2 = ~in1 & (am[1] > ap[0])
    in3 = ~in1 & ~in2
    return Partition(np.flatnonzero(in1), np.flatnonzero(in2), np.flatnonzero(in3), bounds.L)
