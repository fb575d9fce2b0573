"""
Command-line front end.

    regtau estimate   --matrix A.csv --measurements y.csv --reg l1 --lambda 0.1
    regtau experiment --config experiment.json
    regtau sc | if    --reg l2 --lambda 0.1 [--config grid.json]
    regtau asv | bias --reg l1 --config lambdas.json

Options come from built-in defaults, then the JSON ``--config`` file, then
explicit flags. Outputs are written with 17 significant digits so that a
re-run with the same configuration and seed reproduces the file byte for byte.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, fields

import numpy as np

from . import analysis, simgen
from .baselines import DegenerateScaleError
from .score import DegenerateWeightsError
from .solver import (REGS, AllRestartsFailedError, SingularSystemError, SolverConfig, TauProblem,
                     solve_basic, solve_fast)

log = logging.getLogger("regtau")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
FLOAT_FMT = ".17g"

NUMERIC_ERRORS = (DegenerateWeightsError, DegenerateScaleError, SingularSystemError,
                  AllRestartsFailedError, analysis.PopulationError, simgen.ExperimentError,
                  np.linalg.LinAlgError, ArithmeticError)


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# formatting


def fmt_float(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return format(v, FLOAT_FMT)


def to_json(obj) -> str:
    """JSON with every float rendered to 17 significant digits, keys in insertion order."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt_float(r[c]) if isinstance(r[c], (float, np.floating)) else r[c]
                    for c in columns])
    return buf.getvalue()


def write_output(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


# --------------------------------------------------------------------------
# inputs


def read_matrix(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise InputError(f"{path}: not a numeric comma-separated table ({exc})") from None
    if data.size == 0:
        raise InputError(f"{path} is empty")
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path} contains non-finite values")
    return data


def read_vector(path) -> np.ndarray:
    data = read_matrix(path)
    if data.shape[1] != 1 and data.shape[0] != 1:
        raise InputError(f"{path} must hold a single column")
    return data.ravel()


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    return cfg


def _known(cls, d, what):
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise InputError(f"unknown {what} keys: {sorted(extra)}")
    return cls(**d)


def solver_config(cfg: dict, seed) -> SolverConfig:
    d = dict(cfg.get("solver", {}))
    if seed is not None:
        d["seed"] = seed
    return _known(SolverConfig, d, "solver")


def _merged(args, cfg, *names):
    """Flag value if given, else config value, else None."""
    out = {}
    for name in names:
        v = getattr(args, name, None)
        out[name] = v if v is not None else cfg.get(name)
    return out


def _grid(cfg, key, default):
    v = cfg.get(key, default)
    if isinstance(v, dict):
        return np.linspace(float(v["start"]), float(v["stop"]), int(v["num"]))
    return np.asarray(v, dtype=float)


# --------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    if args.matrix is None or args.measurements is None:
        raise InputError("estimate needs --matrix and --measurements")
    A = read_matrix(args.matrix)
    y = read_vector(args.measurements)
    if A.shape[0] != y.size:
        raise InputError(f"A has {A.shape[0]} rows but y has {y.size} entries")
    o = _merged(args, cfg, "reg", "lam", "algorithm")
    reg = o["reg"] or "none"
    lam = 0.0 if o["lam"] is None else float(o["lam"])
    algorithm = o["algorithm"] or "fast"
    if algorithm not in ("fast", "basic"):
        raise InputError("algorithm must be 'fast' or 'basic'")
    scfg = solver_config(cfg, args.seed)
    p = TauProblem(A, y, reg, lam)
    res = (solve_fast if algorithm == "fast" else solve_basic)(p, scfg)
    if args.format == "csv":
        text = "".join(fmt_float(v) + "\n" for v in res.x_hat)
    else:
        diag = {"converged": res.converged, "restarts_used": res.restarts_used,
                "total_irls_iters": res.total_irls_iters,
                "best_restart": res.diagnostics.get("best_restart"),
                "failed_restarts": len(res.diagnostics.get("failures", {}))}
        text = to_json({"x_hat": list(res.x_hat), "objective": res.objective,
                        "sigma_tau": res.sigma_tau, "reg": reg, "lambda": p.lam,
                        "seed": scfg.seed, "diagnostics": diag}) + "\n"
    write_output(text, args.out)
    return EXIT_OK


def experiment_from_config(cfg: dict, seed=None):
    spec_d = dict(cfg.get("spec", {}))
    if seed is not None:
        spec_d["seed"] = seed
    spec = _known(simgen.ExperimentSpec, spec_d, "spec")
    ests = cfg.get("estimators")
    if not ests:
        raise InputError("config needs a nonempty 'estimators' list")
    estimators = [_known(simgen.EstimatorSpec, e, "estimator") if isinstance(e, dict)
                  else simgen.EstimatorSpec(str(e)) for e in ests]
    grid = cfg.get("lambda_grid", list(simgen.DEFAULT_LAMBDAS))
    if not isinstance(grid, list) or not grid:
        raise InputError("lambda_grid must be a nonempty list")
    return spec, estimators, grid


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    spec, estimators, grid = experiment_from_config(cfg, args.seed)
    scfg = solver_config(cfg, None)
    rep = simgen.run_experiment(spec, estimators, grid, scfg, int(cfg.get("n_jobs", 1)),
                                progress=lambda r: log.info("%s", r))
    if rep.failures:
        log.warning("%d estimation failures (within budget)", len(rep.failures))
    if args.format == "json":
        text = to_json({"spec": asdict(spec), "rows": rep.rows,
                        "failures": rep.failures}) + "\n"
    else:
        text = rows_to_csv(rep.rows, simgen.ExperimentReport.COLUMNS)
    write_output(text, args.out)
    return EXIT_OK


def _model(args, cfg, lam_override=None):
    o = _merged(args, cfg, "reg", "lam")
    reg = o["reg"] or "none"
    lam = lam_override if lam_override is not None else (0.0 if o["lam"] is None else o["lam"])
    x0 = cfg.get("x0", [1.5])
    return analysis.GaussianModel(tuple(np.atleast_1d(x0)), reg, float(lam),
                                  float(cfg.get("noise_sd", 1.0)), int(cfg.get("order", 40)))


def _grid_output(rep: analysis.RobustnessReport, args):
    rows = list(rep.rows())
    if args.format == "json":
        return to_json({"kind": rep.kind, "rows": rows}) + "\n"
    return rows_to_csv(rows, ("a0", "y0", "coord", "value"))


DEFAULT_GRID = {"start": -10.0, "stop": 10.0, "num": 11}


def cmd_sc(args) -> int:
    cfg = load_config(args.config)
    model = _model(args, cfg)
    if model.n != 1:
        raise InputError("sc grids need a one-dimensional x0")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rep = analysis.sc_grid(model, _grid(cfg, "a0", DEFAULT_GRID), _grid(cfg, "y0", DEFAULT_GRID),
                           m=int(cfg.get("m", 1000)), seed=seed,
                           cfg=solver_config(cfg, seed))
    write_output(_grid_output(rep, args), args.out)
    return EXIT_OK


def cmd_if(args) -> int:
    cfg = load_config(args.config)
    model = _model(args, cfg)
    if model.n != 1:
        raise InputError("if grids need a one-dimensional x0")
    form = cfg.get("form", "theorem")
    if form not in ("theorem", "complete"):
        raise InputError("form must be 'theorem' or 'complete'")
    rep = analysis.if_grid(model, _grid(cfg, "a0", DEFAULT_GRID), _grid(cfg, "y0", DEFAULT_GRID),
                           form=form)
    write_output(_grid_output(rep, args), args.out)
    return EXIT_OK


def _lambda_table(args, stat):
    cfg = load_config(args.config)
    lams = [args.lam] if args.lam is not None else cfg.get("lambdas", [0.01, 0.1, 0.5])
    if not lams:
        raise InputError("need at least one lambda")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    m, R = int(cfg.get("m", 5000)), int(cfg.get("replicates", 300))
    scfg = cfg.get("solver", {})
    rows = []
    for lam in lams:
        model = _model(args, cfg, float(lam))
        est = None
        if scfg:
            est_cfg = _known(SolverConfig, dict(scfg, seed=seed), "solver")
            est = model.estimator(est_cfg)
        x_hats = analysis.simulate_estimates(model, m, R, est, seed)
        res = (analysis.asv_from_estimates(x_hats, m) if stat == "asv"
               else analysis.bias_from_estimates(x_hats, model.x0))
        for k in range(model.n):
            rows.append({"reg": model.reg, "lambda": float(lam), "coord": k,
                         "value": float(res.value[k]), "se": float(res.se[k]),
                         "replicates": res.replicates})
    if args.format == "json":
        return to_json({"stat": stat, "m": m, "rows": rows}) + "\n"
    return rows_to_csv(rows, ("reg", "lambda", "coord", "value", "se", "replicates"))


def cmd_asv(args) -> int:
    write_output(_lambda_table(args, "asv"), args.out)
    return EXIT_OK


def cmd_bias(args) -> int:
    write_output(_lambda_table(args, "bias"), args.out)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "experiment": cmd_experiment, "sc": cmd_sc, "if": cmd_if,
            "asv": cmd_asv, "bias": cmd_bias}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with command options")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output file (default: standard output)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--reg", choices=REGS)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="regtau", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", parents=[common], help="regularized tau estimate from CSV data")
    est.add_argument("--matrix", help="CSV design matrix, one row per measurement, no header")
    est.add_argument("--measurements", help="CSV measurement column, no header")
    est.add_argument("--algorithm", choices=("fast", "basic"))
    sub.add_parser("experiment", parents=[common], help="MSE versus outlier fraction")
    sub.add_parser("sc", parents=[common], help="sensitivity curve grid (1-D model)")
    sub.add_parser("if", parents=[common], help="influence function grid (1-D model)")
    sub.add_parser("asv", parents=[common], help="Monte Carlo asymptotic variance per lambda")
    sub.add_parser("bias", parents=[common], help="Monte Carlo bias per lambda")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.format is None:
        args.format = "json" if args.command == "estimate" else "csv"
    try:
        return COMMANDS[args.command](args)
    except NUMERIC_ERRORS as exc:
        print(f"regtau: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ValueError, TypeError, KeyError) as exc:
        print(f"regtau: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
