"""
Regularized tau regression.

Minimizes  tau_R^2(x) = sigma_tau^2(y - A x) + lam * sum(J(x_i))  with J in
{none, x^2, |x|} by penalized IRLS, run from many random starts. The IRLS
fixed point solves grad tau_R^2 = 0, where

    grad sigma_tau^2(x) = -(2 / m) A^T Z (y - A x),   z_i = psi_tau(u_i) / (2 u_i).

Hence each step solves (A^T Z A + P) x = A^T Z y with P = lam*m*I for the
ridge penalty and P = diag(lam*m / (2 (|x_k| + delta))) for the l1 majorizer.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _kernels
from .score import (TUKEY, DegenerateWeightsError, TauScores, default_scores, irls_weight, m_scale,
                    psi_tau, w_m)

log = logging.getLogger(__name__)

REGS = ("none", "l2", "l1")
INIT_STRATEGIES = ("gaussian", "subsample-fit")
L1_DELTA = 1e-8
# tolerance used when the objective itself is reported or compared
OBJECTIVE_TOL = 1e-13


class SingularSystemError(np.linalg.LinAlgError):
    pass


class AllRestartsFailedError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def penalty(x, reg: str) -> float:
    x = np.asarray(x, dtype=float)
    if reg == "l2":
        return float(np.sum(x * x))
    if reg == "l1":
        return float(np.sum(np.abs(x)))
    return 0.0


@dataclass
class TauProblem:
    A: np.ndarray
    y: np.ndarray
    reg: str = "none"
    lam: float = 0.0
    scores: TauScores | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.reg not in REGS:
            raise ValueError(f"reg must be one of {REGS}")
        m, n = self.A.shape
        if m < 1 or n < 1:
            raise ValueError("A must be at least 1x1")
        if self.y.shape != (m,):
            raise ValueError(f"y has {self.y.size} entries, A has {m} rows")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.y))):
            raise ValueError("A and y must be finite")
        self.lam = float(self.lam)
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.reg == "none":
            self.lam = 0.0
        if self.scores is None:
            self.scores = default_scores()

    @property
    def shape(self):
        return self.A.shape

    def residuals(self, x):
        return self.y - self.A @ x

    def sigma_tau(self, x, tol=OBJECTIVE_TOL) -> float:
        s = self.scores
        r = self.residuals(x)
        sm = m_scale(r, s.rho1, s.b, tol=tol).sigma
        if sm == 0.0:
            return 0.0
        return float(sm * np.sqrt(np.mean(s.rho2.rho(r / sm))))

    def objective(self, x, tol=OBJECTIVE_TOL) -> float:
        return self.sigma_tau(x, tol) ** 2 + self.lam * penalty(x, self.reg)

    def smooth_gradient(self, x):
        """Gradient of sigma_tau^2 (the loss without the penalty)."""
        s = self.scores
        r = self.residuals(x)
        sm = m_scale(r, s.rho1, s.b, tol=OBJECTIVE_TOL).sigma
        if sm == 0.0:
            return np.zeros(self.A.shape[1])
        u = r / sm
        w = w_m(u, s.rho1, s.rho2)
        return -(sm / len(r)) * (self.A.T @ psi_tau(u, w, s.rho1, s.rho2))

    def gradient(self, x):
        g = self.smooth_gradient(x)
        if self.reg == "l2":
            g = g + 2.0 * self.lam * np.asarray(x)
        elif self.reg == "l1":
            g = g + self.lam * np.sign(x)
        return g


@dataclass(frozen=True)
class SolverConfig:
    """Multi-start settings.

    Q restarts; K IRLS iterations per restart in the first phase of the fast
    solver; M survivors refined to convergence; ``xi`` stops IRLS once
    ||x[k+1] - x[k]|| < xi. ``max_iter`` caps a run "to convergence".
    """

    Q: int = 30
    K: int = 5
    M: int = 5
    xi: float = 1e-8
    seed: int = 0
    init_strategy: str = "gaussian"
    max_iter: int = 1000
    n_jobs: int = 1

    def __post_init__(self):
        if self.Q < 1 or self.K < 1 or self.M < 1:
            raise ValueError("Q, K and M must be >= 1")
        if self.M > self.Q:
            raise ValueError("M (survivors) cannot exceed Q (restarts)")
        if not self.xi > 0:
            raise ValueError("xi must be > 0")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")
        if self.max_iter < 1 or self.n_jobs < 1:
            raise ValueError("max_iter and n_jobs must be >= 1")


@dataclass
class EstimateResult:
    x_hat: np.ndarray
    objective: float
    residuals: np.ndarray
    sigma_tau: float | None
    restarts_used: int = 1
    total_irls_iters: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)


def _solve_normal(A, y, z, pen_diag):
    """Solve (A^T Z A + diag(pen)) x = A^T Z y; retry once with a trace floor."""
    Az = A * z[:, None]
    G = A.T @ Az
    rhs = Az.T @ y
    G[np.diag_indices_from(G)] += pen_diag
    try:
        return linalg.cho_solve(linalg.cho_factor(G, check_finite=False), rhs, check_finite=False)
    except linalg.LinAlgError:
        pass
    floor = 1e-12 * np.trace(G)
    if floor > 0:
        G[np.diag_indices_from(G)] += floor
        try:
            return linalg.cho_solve(linalg.cho_factor(G, check_finite=False), rhs,
                                    check_finite=False)
        except linalg.LinAlgError:
            pass
    raise SingularSystemError("reweighted normal matrix is singular even with a floor")


def _penalty_diag(reg, lam, m, x):
    if reg == "l2":
        return np.full(x.size, lam * m)
    if reg == "l1":
        return 0.5 * lam * m / (np.abs(x) + L1_DELTA)
    return np.zeros(x.size)


def penalized_irls(A, y, weights, reg, lam, x0, max_iter, xi, objective=None):
    """Generic penalized IRLS loop.

    ``weights(r)`` returns ``(z, loss)`` for residuals r, or ``None`` when the
    fit is exact and iteration should stop. ``loss`` is the unpenalized
    objective at r (used only for the descent history).
    """
    m = A.shape[0]
    x = np.array(x0, dtype=float)
    history = []
    for k in range(max_iter):
        r = y - A @ x
        out = weights(r)
        if out is None:
            return x, k, True, history
        z, loss = out
        history.append(loss + lam * penalty(x, reg))
        x_new = _solve_normal(A, y, z, _penalty_diag(reg, lam, m, x))
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step < xi:
            return x, k + 1, True, history
    return x, max_iter, False, history


def _tau_weights(scores: TauScores):
    rho1, rho2, b = scores.rho1, scores.rho2, scores.b
    if rho1.family == rho2.family == TUKEY:
        c1, c2 = rho1.c, rho2.c

        def tukey_weights(r):
            status, _, z, loss = _kernels.tukey_tau_weights(r, c1, c2, b, 1e-9, 200)
            if status == _kernels.EXACT_FIT:
                return None
            if status == _kernels.DEGENERATE:
                raise DegenerateWeightsError("all standardized residuals beyond the rho1 clip")
            return z, loss

        return tukey_weights

    def weights(r):
        sm = m_scale(r, rho1, b).sigma
        if sm == 0.0:
            return None
        u = r / sm
        w = w_m(u, rho1, rho2)
        z = irls_weight(u, psi_tau(u, w, rho1, rho2))
        loss = sm * sm * np.mean(rho2.rho(u))
        return z, loss

    return weights


def _result(p: TauProblem, x, iters, converged, history, restarts=1, **diag):
    r = p.residuals(x)
    st = p.sigma_tau(x)
    obj = st * st + p.lam * penalty(x, p.reg)
    return EstimateResult(x_hat=x, objective=obj, residuals=r, sigma_tau=st,
                          restarts_used=restarts, total_irls_iters=iters,
                          converged=converged, history=history, diagnostics=diag)


def irls_run(p: TauProblem, x0, K: int | None = None, xi: float = 1e-8,
             max_iter: int = 1000) -> EstimateResult:
    """Regularized IRLS from x0 for at most K iterations (K=None: until convergence)."""
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (p.A.shape[1],) or not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be a finite vector with one entry per column of A")
    cap = max_iter if K is None else int(K)
    x, iters, conv, hist = penalized_irls(p.A, p.y, _tau_weights(p.scores), p.reg, p.lam,
                                          x0, cap, xi)
    return _result(p, x, iters, conv, hist)


def random_init(p: TauProblem, strategy: str, rng: np.random.Generator):
    m, n = p.A.shape
    if strategy == "gaussian":
        return rng.standard_normal(n)
    if strategy == "subsample-fit":
        rows = np.sort(rng.choice(m, size=min(n, m), replace=False))
        x, *_ = linalg.lstsq(p.A[rows], p.y[rows], check_finite=False)
        return x
    raise ValueError(f"unknown init strategy {strategy!r}")


def restart_streams(seed: int, Q: int):
    """One independent generator per restart, split deterministically from ``seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(Q)]


def _map(fn, items, n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _run_restarts(p, cfg, cap):
    streams = restart_streams(cfg.seed, cfg.Q)

    def one(q):
        x0 = random_init(p, cfg.init_strategy, streams[q])
        try:
            return irls_run(p, x0, K=cap, xi=cfg.xi, max_iter=cfg.max_iter)
        except (SingularSystemError, DegenerateWeightsError) as exc:
            return exc

    return _map(one, range(cfg.Q), cfg.n_jobs)


def _best(results):
    best = None
    for q, res in enumerate(results):
        if isinstance(res, Exception):
            continue
        if best is None or res.objective < results[best].objective:
            best = q
    return best


def _failures(results):
    return {q: repr(res) for q, res in enumerate(results) if isinstance(res, Exception)}


def solve_basic(p: TauProblem, cfg: SolverConfig = SolverConfig()) -> EstimateResult:
    """Run IRLS to convergence from Q random starts and keep the lowest objective."""
    results = _run_restarts(p, cfg, None)
    q = _best(results)
    if q is None:
        raise AllRestartsFailedError("every restart failed", _failures(results))
    best = results[q]
    total = sum(r.total_irls_iters for r in results if not isinstance(r, Exception))
    best.restarts_used = cfg.Q
    best.total_irls_iters = total
    best.diagnostics = {"best_restart": q, "failures": _failures(results)}
    return best


def solve_fast(p: TauProblem, cfg: SolverConfig = SolverConfig()) -> EstimateResult:
    """Two-phase search: Q short runs of K iterations, then the M best refined to convergence."""
    phase1 = _run_restarts(p, cfg, cfg.K)
    ok = [q for q, r in enumerate(phase1) if not isinstance(r, Exception)]
    if not ok:
        raise AllRestartsFailedError("every phase-1 restart failed", _failures(phase1))
    # stable sort keeps the lowest index first among ties
    survivors = sorted(ok, key=lambda q: phase1[q].objective)[:cfg.M]

    def refine(q):
        try:
            return irls_run(p, phase1[q].x_hat, K=None, xi=cfg.xi, max_iter=cfg.max_iter)
        except (SingularSystemError, DegenerateWeightsError) as exc:
            return exc

    refined = _map(refine, survivors, cfg.n_jobs)
    j = _best(refined)
    if j is None:
        raise AllRestartsFailedError("every refinement failed", _failures(refined))
    best = refined[j]
    best.restarts_used = cfg.Q
    best.total_irls_iters = (sum(phase1[q].total_irls_iters for q in ok)
                             + sum(r.total_irls_iters for r in refined
                                   if not isinstance(r, Exception)))
    best.diagnostics = {
        "best_restart": survivors[j],
        "survivors": survivors,
        "phase1_objectives": [phase1[q].objective for q in ok],
        "failures": {**_failures(phase1), **{survivors[i]: v for i, v in _failures(refined).items()}},
    }
    return best


def tau_estimator(reg="none", lam=0.0, cfg: SolverConfig = SolverConfig(), scores=None,
                  algorithm="fast"):
    """Return a callable (A, y) -> x_hat wrapping the chosen tau solver."""
    solve = {"fast": solve_fast, "basic": solve_basic}[algorithm]

    def estimate(A, y):
        return solve(TauProblem(A, y, reg, lam, scores), cfg).x_hat

    return estimate
