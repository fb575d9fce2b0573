"""
Synthetic contaminated inverse problems and the MSE-vs-contamination harness.

Every random object is a pure function of (spec, seed): realization i draws
from ``SeedSequence(seed).spawn(realizations)[i]``, so results do not depend
on worker count or evaluation order.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import BaselineKind
from .solver import REGS, SolverConfig, TauProblem, solve_fast

log = logging.getLogger(__name__)

DEFAULT_FRACS = (0.0, 0.1, 0.2, 0.3, 0.4)
DEFAULT_LAMBDAS = tuple(np.logspace(-4, 1, 12))
ESTIMATOR_KINDS = ("tau", "ls", "m-huber-mad", "mm-oracle-scale")
FAILURE_BUDGET = 0.05


class ExperimentError(RuntimeError):
    pass


def gen_design(m, n, cond, rng):
    """Gaussian m x n matrix with geometrically spaced singular values s_max .. s_max/cond."""
    if m < n:
        raise ValueError("design needs m >= n")
    if cond < 1:
        raise ValueError("condition number must be >= 1")
    G = rng.standard_normal((m, n))
    U, s, Vt = np.linalg.svd(G, full_matrices=False)
    spectrum = s[0] * float(cond) ** (-np.arange(n) / max(n - 1, 1))
    return (U * spectrum) @ Vt


def gen_truth(n, sparsity, rng):
    """Standard normal vector with round(sparsity * n) (at least one) nonzero entries."""
    if not 0 < sparsity <= 1:
        raise ValueError("sparsity must be in (0, 1]")
    x = np.zeros(n)
    k = max(1, int(np.floor(sparsity * n + 0.5)))
    support = rng.choice(n, size=k, replace=False)
    x[support] = rng.standard_normal(k)
    return x


def gen_measurements(A, x, noise_sd, rng):
    return A @ x + noise_sd * rng.standard_normal(A.shape[0])


def outlier_count(frac, m):
    return int(np.floor(frac * m + 0.5))


def inject_outliers(y, frac, var_ratio, rng, signal):
    """Add N(0, var_ratio * var(signal)) to round(frac * m) randomly chosen entries.

    ``signal`` is the noiseless data A x. Returns ``(y_contaminated, mask)``.
    """
    if not 0 <= frac <= 1:
        raise ValueError("outlier fraction must be in [0, 1]")
    y = np.array(y, dtype=float)
    m = y.size
    k = outlier_count(frac, m)
    mask = np.zeros(m, dtype=bool)
    if k == 0:
        return y, mask
    idx = rng.choice(m, size=k, replace=False)
    mask[idx] = True
    y[idx] += rng.normal(0.0, np.sqrt(var_ratio * np.var(signal)), size=k)
    return y, mask


@dataclass(frozen=True)
class ExperimentSpec:
    m: int = 60
    n: int = 20
    cond: float = 10.0
    x_sparsity: float = 1.0
    outlier_fracs: tuple = DEFAULT_FRACS
    outlier_var_ratio: float = 10.0
    noise_sd: float = 1.0
    realizations: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outlier_fracs", tuple(float(f) for f in self.outlier_fracs))
        if self.m < self.n or self.n < 1:
            raise ValueError("need m >= n >= 1")
        if self.cond < 1:
            raise ValueError("cond must be >= 1")
        if not 0 < self.x_sparsity <= 1:
            raise ValueError("x_sparsity must be in (0, 1]")
        if not self.outlier_fracs or any(not 0 <= f <= 1 for f in self.outlier_fracs):
            raise ValueError("outlier fractions must be in [0, 1]")
        if self.outlier_var_ratio < 0 or self.noise_sd < 0:
            raise ValueError("variances must be nonnegative")
        if self.realizations < 2:
            raise ValueError("need at least 2 realizations")


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator family in an experiment; lambda is chosen from the grid."""

    kind: str
    reg: str = "none"
    huber_c: float = 1.345

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator kind must be one of {ESTIMATOR_KINDS}")
        if self.reg not in REGS:
            raise ValueError(f"reg must be one of {REGS}")

    @property
    def label(self):
        return self.kind if self.reg == "none" else f"{self.kind}-{self.reg}"


@dataclass
class Realization:
    A: np.ndarray
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray


def realization_seeds(seed, count):
    return np.random.SeedSequence(seed).spawn(count)


def child_seed(seq: np.random.SeedSequence, k: int) -> np.random.SeedSequence:
    """k-th child of seq without touching its spawn counter (``spawn`` is stateful)."""
    return np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (k,),
                                  pool_size=seq.pool_size)


def make_realization(spec: ExperimentSpec, seq: np.random.SeedSequence, frac: float):
    """Problem instance for one realization; A, x and the Gaussian noise do not depend on frac."""
    base, contamination = child_seed(seq, 0), child_seed(seq, 1)
    rng = np.random.default_rng(base)
    A = gen_design(spec.m, spec.n, spec.cond, rng)
    x = gen_truth(spec.n, spec.x_sparsity, rng)
    signal = A @ x
    y = signal + spec.noise_sd * rng.standard_normal(spec.m)
    y, mask = inject_outliers(y, frac, spec.outlier_var_ratio, np.random.default_rng(contamination),
                              signal)
    return Realization(A, x, y, mask)


def _estimate(est: EstimatorSpec, lam, real: Realization, noise_sd, solver_cfg):
    if est.kind == "tau":
        return solve_fast(TauProblem(real.A, real.y, est.reg, lam), solver_cfg).x_hat
    kind = BaselineKind(est.kind, est.reg, lam, est.huber_c,
                        noise_sd if est.kind == "mm-oracle-scale" else None)
    return kind(real.A, real.y)


def _run_one(args):
    spec, seq, frac, estimators, grids, solver_cfg = args
    real = make_realization(spec, seq, frac)
    # restarts get their own stream derived from the realization's entropy
    cfg = SolverConfig(**{**asdict(solver_cfg), "seed": int(seq.generate_state(1)[0])})
    out = {}
    for est in estimators:
        for lam in grids[est]:
            try:
                out[(est, lam)] = _estimate(est, lam, real, spec.noise_sd, cfg) - real.x
            except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                out[(est, lam)] = exc
    return out


@dataclass
class MSEReport:
    mse: float
    bias_sq: float
    trace_var: float
    bias: np.ndarray


def mse_report(x_hats, x0) -> MSEReport:
    """Sample MSE and its exact bias/variance split.

    ``x_hats`` has one estimate per row; ``x0`` is the truth, either one
    vector or one per row. The variance uses the 1/R normalization so that
    mse = trace_var + bias_sq holds on the sample.
    """
    err = np.atleast_2d(np.asarray(x_hats, dtype=float)) - np.asarray(x0, dtype=float)
    if err.shape[0] < 2:
        raise ValueError("mse_report needs at least 2 replicates")
    bias = err.mean(axis=0)
    dev = err - bias
    trace_var = float(np.mean(np.sum(dev * dev, axis=1)))
    bias_sq = float(bias @ bias)
    return MSEReport(trace_var + bias_sq, bias_sq, trace_var, bias)


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    curves: dict = field(default_factory=dict, repr=False)

    COLUMNS = ("estimator", "reg", "outlier_frac", "lambda_best", "mse", "bias_sq", "var")

    def row(self, estimator, frac):
        for r in self.rows:
            if r["estimator"] == estimator and r["outlier_frac"] == frac:
                return r
        raise KeyError((estimator, frac))

    def mse(self, estimator, frac):
        return self.row(estimator, frac)["mse"]


def lambda_unit(est: EstimatorSpec, m: int) -> float:
    """Factor converting a grid value to the estimator's own lambda.

    The tau and M objectives average the loss over measurements while the
    LS objective sums it, so LS gets the grid multiplied by m. With this the
    same grid brackets every estimator's optimum.
    """
    return float(m) if est.kind == "ls" else 1.0


def _grid_for(est, lambda_grid, m):
    if est.reg == "none":
        return (0.0,)
    unit = lambda_unit(est, m)
    return tuple(unit * float(v) for v in lambda_grid)


def run_experiment(spec: ExperimentSpec, estimators, lambda_grid=DEFAULT_LAMBDAS,
                   solver_cfg: SolverConfig = SolverConfig(), n_jobs: int = 1,
                   progress=None) -> ExperimentReport:
    """Best-lambda MSE per estimator and outlier fraction.

    ``lambda_grid`` is in averaged-loss units (see ``lambda_unit``); the
    reported ``lambda_best`` is in the estimator's own units.
    Estimation failures are dropped from the statistics and listed in
    ``report.failures``; more than 5% failures for any (estimator, fraction,
    lambda) cell is an error.
    """
    estimators = [e if isinstance(e, EstimatorSpec) else EstimatorSpec(**e) for e in estimators]
    if not estimators:
        raise ValueError("need at least one estimator")
    if len(set(estimators)) != len(estimators):
        raise ValueError("duplicate estimators")
    grids = {e: _grid_for(e, lambda_grid, spec.m) for e in estimators}
    if any(len(g) == 0 for g in grids.values()):
        raise ValueError("lambda grid is empty")
    seeds = realization_seeds(spec.seed, spec.realizations)
    report = ExperimentReport(spec)
    for frac in spec.outlier_fracs:
        tasks = [(spec, seq, frac, estimators, grids, solver_cfg) for seq in seeds]
        if n_jobs > 1:
            with ProcessPoolExecutor(max_workers=n_jobs) as ex:
                results = list(ex.map(_run_one, tasks))
        else:
            results = [_run_one(t) for t in tasks]
        for est in estimators:
            curve = []
            for lam in grids[est]:
                errs, failed = [], []
                for i, res in enumerate(results):
                    val = res[(est, lam)]
                    if isinstance(val, Exception):
                        failed.append(i)
                        report.failures.append({"estimator": est.label, "outlier_frac": frac,
                                                "lambda": lam, "realization": i,
                                                "error": repr(val)})
                    else:
                        errs.append(val)
                if len(failed) > FAILURE_BUDGET * spec.realizations:
                    raise ExperimentError(
                        f"{est.label} failed on {len(failed)}/{spec.realizations} realizations "
                        f"at outlier fraction {frac}, lambda {lam}")
                curve.append((lam, mse_report(np.array(errs), 0.0)))
            report.curves[(est.label, frac)] = curve
            lam_best, best = min(curve, key=lambda item: item[1].mse)
            report.rows.append({"estimator": est.label, "reg": est.reg, "outlier_frac": frac,
                                "lambda_best": lam_best, "mse": best.mse,
                                "bias_sq": best.bias_sq, "var": best.trace_var})
            if progress:
                progress(report.rows[-1])
    return report
