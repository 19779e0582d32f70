"""Monte Carlo experiments: region contours, baseline comparison, CSIT sweep.

Every trial draws its channels from ``default_rng([seed, trial])`` so trial
``t`` sees the same normalised fading in every configuration point and every
scheme (common random numbers), and serial and threaded runs agree exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .allocator import LN2, SolverConfig, _UserTerms, _root_decreasing, allocate
from .channel import (ChannelPrior, EstimationModel, GainBounds, Partition, gain_bounds,
                      partition, sample_realization)
from .rates import PowerAllocation, Weights, rate_triple

Z95 = 1.959963984540054


@dataclass
class ExperimentConfig:
    L: int = 64
    P: float = 64.0
    snr1_db: float | list = 10.0
    snr2_db: float | list = 10.0
    sigma: float = 0.0
    epsilon: float | list = 0.05
    weight_grid: list = field(default_factory=lambda: [[1.0, 1.0, 1.0]])
    trials: int = 200
    seed: int = 0
    threads: int = 1
    common_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not self.P > 0:
            raise ValueError("P must be > 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def weights(self) -> list[Weights]:
        return [Weights(*map(float, w)) for w in self.weight_grid]

    def snr_points(self) -> list[tuple[float, float]]:
        s1 = _as_list(self.snr1_db)
        s2 = _as_list(self.snr2_db)
        if len(s1) == 1 and len(s2) > 1:
            s1 = s1 * len(s2)
        if len(s2) == 1 and len(s1) > 1:
            s2 = s2 * len(s1)
        if len(s1) != len(s2):
            raise ValueError("snr1_db and snr2_db sweeps must have equal length")
        return list(zip(s1, s2))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _as_list(x):
    return [float(v) for v in x] if isinstance(x, (list, tuple)) else [float(x)]


@dataclass
class ExperimentResult:
    """Averaged rows plus the per-trial data they were computed from.

    ``per_trial[k]`` belongs to ``rows[k]`` and holds arrays ``rates``
    (trials x 3), ``objective`` (trials,) and ``allocations`` (trials x 3 x L).
    """

    kind: str
    config: dict
    rows: list[dict]
    per_trial: list[dict]
    trials: int
    diagnostics: dict = field(default_factory=dict)

    def column(self, name, **match):
        return np.array([r[name] for r in self.rows if all(r[k] == v for k, v in match.items())])

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(self.rows[0].keys())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "config": self.config,
            "trial_seeds": [[self.config["seed"], t] for t in range(self.trials)],
            "rows": self.rows,
            "diagnostics": self.diagnostics,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    return v


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# --------------------------------------------------------------------------
# baselines


def baseline_uniform(bounds: GainBounds, part: Partition, P: float) -> PowerAllocation:
    """P/(3L) on every message and sub-channel; confidential power off its set is dropped."""
    L = bounds.L
    m1, m2, _ = part.masks()
    each = P / (3 * L)
    p0 = np.full(L, each)
    return PowerAllocation(p0, np.where(m1, each, 0.0), np.where(m2, each, 0.0), P)


def secrecy_waterfilling(bounds: GainBounds, part: Partition, weights: Weights, budget: float,
                         cfg: SolverConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum secrecy-rate allocation of ``budget`` without a common message.

    Each sub-channel in S_i gets ``[beta_i(lam)]+``, the root of the
    confidential marginal utility; ``lam`` is bracketed so the total is ``budget``.
    """
    cfg = cfg or SolverConfig()
    L = bounds.L
    m1, m2, _ = part.masks()
    p1, p2 = np.zeros(L), np.zeros(L)
    if budget <= 0 or not (m1.any() or m2.any()):
        return p1, p2
    terms = (_UserTerms(bounds, weights, 1), _UserTerms(bounds, weights, 2))

    def alloc(lam):
        return (np.where(m1, np.maximum(terms[0].beta(lam), 0.0), 0.0),
                np.where(m2, np.maximum(terms[1].beta(lam), 0.0), 0.0))

    def f(x):
        a, b = alloc(math.exp(x))
        return float(a.sum() + b.sum()) - budget

    am, ap = bounds.alpha_minus, bounds.alpha_plus
    cap = max(weights.w1 * np.max(am[0] - ap[1], initial=0.0),
              weights.w2 * np.max(am[1] - ap[0], initial=0.0)) / (2 * LN2)
    hi = math.log(cap * cfg.bracket_growth)
    lo = hi - 40 * math.log(2.0)
    while f(lo) < 0:
        lo -= math.log(cfg.bracket_growth)
    x, _, _ = _root_decreasing(f, lo, hi, f(lo), f(hi), cfg.lambda_tol * budget, cfg.max_iters)
    return alloc(math.exp(x))


def baseline_common_split(bounds: GainBounds, part: Partition, weights: Weights, P: float,
                          common_fraction: float = 1.0 / 3.0, cfg: SolverConfig | None = None) -> PowerAllocation:
    """Fixed common share spread uniformly; the rest by secrecy water-filling."""
    L = bounds.L
    p0 = np.full(L, common_fraction * P / L)
    p1, p2 = secrecy_waterfilling(bounds, part, weights, (1.0 - common_fraction) * P, cfg)
    return PowerAllocation(p0, p1, p2, P)


# --------------------------------------------------------------------------
# experiment drivers


def _trial_bounds(prior, model, seed, trial):
    real = sample_realization(prior, model, [seed, trial])
    return real, gain_bounds(prior, model, real.h_hat)


def _map_trials(fn, trials, threads):
    if threads <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, range(trials)))


def _summarise(rates, objective):
    n = rates.shape[0]
    mean = rates.mean(axis=0)
    hw = Z95 * rates.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(3, math.nan)
    obj_hw = Z95 * objective.std(ddof=1) / math.sqrt(n) if n > 1 else math.nan
    return {
        "R0": float(mean[0]), "R1": float(mean[1]), "R2": float(mean[2]),
        "objective": float(objective.mean()),
        "R0_hw": float(hw[0]), "R1_hw": float(hw[1]), "R2_hw": float(hw[2]),
        "objective_hw": float(obj_hw),
    }


def _evaluate(bounds, part, weights, p):
    r = rate_triple(bounds, part, p)
    rates = np.array([r.r0, r.r1, r.r2])
    return rates, float(np.dot(weights.as_tuple(), rates))


def _stack(items):
    return {
        "rates": np.array([i[0] for i in items]),
        "objective": np.array([i[1] for i in items]),
        "allocations": np.array([[i[2].p0, i[2].p1, i[2].p2] for i in items]),
    }


def region_sweep(cfg: ExperimentConfig, solver: SolverConfig | None = None) -> ExperimentResult:
    """Average boundary point for every weight triple of the grid."""
    (snr1, snr2), = cfg.snr_points()[:1]
    prior = ChannelPrior.from_snr_db(snr1, snr2, cfg.L)
    model = EstimationModel(cfg.sigma, _as_list(cfg.epsilon)[0])
    wgrid = cfg.weights
    steps = np.zeros(4, dtype=int)

    def one(t):
        _, b = _trial_bounds(prior, model, cfg.seed, t)
        part = partition(b)
        out = []
        for w in wgrid:
            res = allocate(b, part, w, cfg.P, solver)
            rates = np.array([res.rates.r0, res.rates.r1, res.rates.r2])
            out.append((rates, float(np.dot(w.as_tuple(), rates)), res.allocation, res.diagnostics.step))
        return out

    per = _map_trials(one, cfg.trials, cfg.threads)
    rows, data = [], []
    for k, w in enumerate(wgrid):
        items = [trial[k] for trial in per]
        for it in items:
            steps[it[3]] += 1
        st = _stack(items)
        rows.append({"w0": w.w0, "w1": w.w1, "w2": w.w2, "scheme": "optimal",
                     **_summarise(st["rates"], st["objective"])})
        data.append(st)
    diag = {"step_counts": {"1": int(steps[1]), "2": int(steps[2]), "3": int(steps[3])}}
    return ExperimentResult("region", cfg.to_dict(), rows, data, cfg.trials, diag)


SCHEMES = ("optimal", "uniform", "common_split")


def compare_baselines(cfg: ExperimentConfig, solver: SolverConfig | None = None) -> ExperimentResult:
    """Optimal allocation against the two baselines, one row per (SNR point, scheme)."""
    w = cfg.weights[0]
    model = EstimationModel(cfg.sigma, _as_list(cfg.epsilon)[0])
    rows, data = [], []
    for snr1, snr2 in cfg.snr_points():
        prior = ChannelPrior.from_snr_db(snr1, snr2, cfg.L)

        def one(t):
            _, b = _trial_bounds(prior, model, cfg.seed, t)
            part = partition(b)
            allocs = {
                "optimal": allocate(b, part, w, cfg.P, solver).allocation,
                "uniform": baseline_uniform(b, part, cfg.P),
                "common_split": baseline_common_split(b, part, w, cfg.P, cfg.common_fraction, solver),
            }
            return {s: (*_evaluate(b, part, w, p), p) for s, p in allocs.items()}

        per = _map_trials(one, cfg.trials, cfg.threads)
        opt = np.array([tr["optimal"][1] for tr in per])
        for s in SCHEMES:
            st = _stack([tr[s] for tr in per])
            margin = float(np.min(opt - st["objective"]))
            rows.append({"snr1_db": snr1, "snr2_db": snr2, "scheme": s,
                         **_summarise(st["rates"], st["objective"]),
                         "min_gap_to_optimal": margin})
            data.append(st)
    return ExperimentResult("compare", cfg.to_dict(), rows, data, cfg.trials)


def _realized_rates(h, part, p):
    """Rates the allocation actually gets on the true gains (secrecy terms floored at 0)."""
    g = h * h
    conf = p.p1 + p.p2
    tot = p.p0 + conf
    r0 = min(0.5 * float(np.sum(np.log2((1 + g[i] * tot) / (1 + g[i] * conf)))) for i in (0, 1))
    s1, s2 = part.s1, part.s2
    r1 = 0.5 * np.sum(np.maximum(np.log2((1 + g[0, s1] * p.p1[s1]) / (1 + g[1, s1] * p.p1[s1])), 0.0))
    r2 = 0.5 * np.sum(np.maximum(np.log2((1 + g[1, s2] * p.p2[s2]) / (1 + g[0, s2] * p.p2[s2])), 0.0))
    return np.array([r0, float(r1), float(r2)])


def csit_sweep(cfg: ExperimentConfig, solver: SolverConfig | None = None) -> ExperimentResult:
    """Guaranteed (bound-based) rates versus the outage threshold epsilon.

    The same true channels and estimates are reused for every epsilon.
    """
    w = cfg.weights[0]
    (snr1, snr2), = cfg.snr_points()[:1]
    prior = ChannelPrior.from_snr_db(snr1, snr2, cfg.L)
    eps_list = _as_list(cfg.epsilon)

    def one(t):
        real = sample_realization(prior, EstimationModel(cfg.sigma, eps_list[0]), [cfg.seed, t])
        out = []
        for eps in eps_list:
            b = gain_bounds(prior, EstimationModel(cfg.sigma, eps), real.h_hat)
            part = partition(b)
            p = allocate(b, part, w, cfg.P, solver).allocation
            rates, obj = _evaluate(b, part, w, p)
            out.append((rates, obj, p, _realized_rates(real.h, part, p)))
        return out

    per = _map_trials(one, cfg.trials, cfg.threads)
    rows, data = [], []
    for k, eps in enumerate(eps_list):
        items = [tr[k] for tr in per]
        st = _stack(items)
        st["realized"] = np.array([i[3] for i in items])
        real_mean = st["realized"].mean(axis=0)
        rows.append({"sigma": cfg.sigma, "epsilon": eps, "scheme": "optimal",
                     **_summarise(st["rates"], st["objective"]),
                     "R0_realized": float(real_mean[0]), "R1_realized": float(real_mean[1]),
                     "R2_realized": float(real_mean[2])})
        data.append(st)
    return ExperimentResult("csit", cfg.to_dict(), rows, data, cfg.trials)


def recompute_rates(cfg: ExperimentConfig, result: ExperimentResult, row: int, trial: int) -> np.ndarray:
    """Re-derive one stored per-trial rate triple from its allocation and seed."""
    r = result.rows[row]
    if result.kind == "compare":
        prior = ChannelPrior.from_snr_db(r["snr1_db"], r["snr2_db"], cfg.L)
    else:
        (s1, s2), = cfg.snr_points()[:1]
        prior = ChannelPrior.from_snr_db(s1, s2, cfg.L)
    eps = r.get("epsilon", _as_list(cfg.epsilon)[0])
    model = EstimationModel(cfg.sigma, eps)
    real = sample_realization(prior, model, [cfg.seed, trial])
    b = gain_bounds(prior, model, real.h_hat)
    a = result.per_trial[row]["allocations"][trial]
    rt = rate_triple(b, partition(b), PowerAllocation(a[0], a[1], a[2], cfg.P))
    return np.array([rt.r0, rt.r1, rt.r2])


def boundary_contour(result: ExperimentResult, level: float, scale: float = 1.0) -> dict:
    """Points of the averaged boundary where ``E[R0] / scale == level``.

    For every ``(w1, w2)`` direction of a region sweep the rows are ordered by
    ``w0`` (along which ``E[R0]`` grows) and ``(E[R1], E[R2])`` is linearly
    interpolated at the crossing.  Directions whose sweep does not reach the
    level are left out.  Returns ``{(w1, w2): (R1, R2)}`` in the same scale.
    """
    dirs: dict[tuple[float, float], list[dict]] = {}
    for r in result.rows:
        dirs.setdefault((r["w1"], r["w2"]), []).append(r)
    out = {}
    for key, rows in dirs.items():
        rows = sorted(rows, key=lambda r: r["w0"])
        r0 = np.array([r["R0"] for r in rows]) / scale
        for a, b in zip(range(len(rows) - 1), range(1, len(rows))):
            if r0[a] <= level <= r0[b] and r0[b] > r0[a]:
                t = (level - r0[a]) / (r0[b] - r0[a])
                out[key] = tuple((1 - t) * rows[a][c] / scale + t * rows[b][c] / scale for c in ("R1", "R2"))
                break
    return out
