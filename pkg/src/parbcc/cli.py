"""Command-line front end.

    parbcc allocate --config bounds.json
    parbcc region   --config exp.json --out results/region
    parbcc compare  --config exp.json --set trials=50 --seed 3
    parbcc csit     --config exp.json --out results/csit
    parbcc validate --instances 100 --max-L 2

Experiment configs are JSON objects whose keys are the ``ExperimentConfig``
fields; ``--set key=value`` overrides them (values parsed as JSON when
possible, last one wins).  Errors are printed to stderr as a JSON record.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import sim
from .allocator import BracketError, SolverConfig, allocate
from .channel import GainBounds, partition
from .oracle import GridSpec, grid_search_optimum, kkt_residuals
from .rates import Weights, weighted_sum_rate

EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class ConfigError(ValueError):
    pass


def _parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def _load(args) -> dict:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    doc.update(_parse_overrides(args.set))
    if args.seed is not None:
        doc["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        doc["threads"] = args.threads
    return doc


def _emit(args, text_csv, text_json):
    if not args.out:
        sys.stdout.write(text_csv)
        return
    base = Path(args.out)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".csv").write_text(text_csv)
    base.with_suffix(".json").write_text(text_json)
    print(f"wrote {base.with_suffix('.csv')} and {base.with_suffix('.json')}", file=sys.stderr)


def cmd_allocate(args) -> int:
    doc = _load(args)
    doc.pop("threads", None)
    try:
        if "alpha" in doc:
            bounds = GainBounds.perfect(doc["alpha"])
        else:
            bounds = GainBounds(doc["alpha_minus"], doc["alpha_plus"])
        weights = Weights(*map(float, doc.get("weights", [1.0, 1.0, 1.0])))
        P = float(doc["P"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad allocate config: {e}") from e
    part = partition(bounds)
    res = allocate(bounds, part, weights, P, SolverConfig(**doc.get("solver", {})))
    a, r = res.allocation, res.rates
    out = {
        "config": doc,
        "partition": {"S1": part.s1.tolist(), "S2": part.s2.tolist(), "S3": part.s3.tolist()},
        "allocation": {"p0": a.p0.tolist(), "p1": a.p1.tolist(), "p2": a.p2.tolist(), "total": a.total},
        "rates": {"R0": r.r0, "R1": r.r1, "R2": r.r2},
        "objective": weighted_sum_rate(bounds, part, weights, a),
        "diagnostics": res.diagnostics.as_dict(),
    }
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _experiment(kind):
    run = {"region": sim.region_sweep, "compare": sim.compare_baselines, "csit": sim.csit_sweep}[kind]

    def cmd(args) -> int:
        try:
            cfg = sim.ExperimentConfig.from_dict(_load(args))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        result = run(cfg)
        header = "# config=" + json.dumps(cfg.to_dict(), sort_keys=True) + "\n"
        _emit(args, header + result.to_csv(), result.to_json() + "\n")
        return 0

    return cmd


def random_instance(rng: np.random.Generator, max_L: int = 2):
    """Random small instance: perfect or imperfect CSIT, positive weights and budget."""
    L = int(rng.integers(1, max_L + 1))
    lo = rng.exponential(3.0, (2, L)) + 1e-3
    if rng.random() < 0.5:
        bounds = GainBounds.perfect(lo)
    else:
        bounds = GainBounds(lo, lo * (1.0 + rng.random((2, L))))
    weights = Weights(*rng.uniform(0.2, 3.0, 3))
    P = float(rng.uniform(0.5, 10.0))
    return bounds, weights, P


def validate(instances: int = 100, max_L: int = 2, seed: int = 0, gap_tol: float = 1e-3,
             kkt_tol: float = 1e-6, grid: GridSpec | None = None) -> dict:
    """Oracle suite: grid agreement and KKT residuals on generated instances."""
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(instances):
        bounds, weights, P = random_instance(rng, max_L)
        part = partition(bounds)
        res = allocate(bounds, part, weights, P)
        d = res.diagnostics
        obj = weighted_sum_rate(bounds, part, weights, res.allocation)
        _, oracle_obj, _ = grid_search_optimum(bounds, part, weights, P, grid)
        kkt = kkt_residuals(bounds, part, weights, res.allocation, d.lam,
                            mu=d.mu if d.step == 3 else None,
                            leader=d.step if d.step in (1, 2) else None)
        cases.append({"instance": k, "L": bounds.L, "step": d.step, "objective": obj,
                      "oracle": oracle_obj, "gap": oracle_obj - obj, "kkt": kkt.max_residual})
    max_gap = max(c["gap"] for c in cases)
    max_kkt = max(c["kkt"] for c in cases)
    return {"instances": instances, "max_L": max_L, "seed": seed,
            "max_objective_gap": max_gap, "max_kkt_residual": max_kkt,
            "passed": bool(max_gap <= gap_tol and max_kkt <= kkt_tol), "cases": cases}


def cmd_validate(args) -> int:
    t0 = time.time()
    report = validate(args.instances, args.max_L, args.seed if args.seed is not None else 0)
    report["seconds"] = round(time.time() - t0, 3)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{status} instances={report['instances']} max_gap={report['max_objective_gap']:.3e} "
          f"max_kkt={report['max_kkt_residual']:.3e}")
    return 0 if report["passed"] else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parbcc", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output path (experiments: prefix for .csv and .json)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--threads", type=int, default=None)

    s = sub.add_parser("allocate", help="optimal allocation for explicit gain bounds")
    common(s)
    s.set_defaults(func=cmd_allocate)
    for kind, helptext in (("region", "average boundary points over a weight grid"),
                           ("compare", "optimal vs uniform vs common-split baselines"),
                           ("csit", "guaranteed rates versus the outage threshold")):
        s = sub.add_parser(kind, help=helptext)
        common(s)
        s.set_defaults(func=_experiment(kind))
    s = sub.add_parser("validate", help="grid-oracle and KKT checks on random instances")
    common(s)
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--max-L", dest="max_L", type=int, default=2)
    s.set_defaults(func=cmd_validate)
    return p


def _error(kind, exc, code):
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _error("config", e, EXIT_CONFIG)
    except (BracketError, FloatingPointError) as e:
        return _error("solver", e, EXIT_SOLVER)
    except ValueError as e:
        return _error("invalid_input", e, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
