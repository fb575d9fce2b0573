"""
Comparison estimators: least squares and Huber M-estimators, each with no,
ridge or lasso penalty.

Objectives (lam >= 0):

    LS     ||y - A x||^2 + lam * J(x)
    M      sigma^2 * mean(rho_huber(r / sigma)) + lam * J(x)

The M objective is written in the same units as the tau objective so that
both are solved by the same penalized IRLS with the same penalty surrogates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.linear_model import lars_path

from .score import MAD_CONSISTENCY, ScoreFunction, irls_weight
from .solver import REGS, EstimateResult, penalized_irls, penalty

KINDS = ("ls", "m-huber-mad", "mm-oracle-scale")


class DegenerateScaleError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineKind:
    kind: str = "ls"
    reg: str = "none"
    lam: float = 0.0
    huber_c: float = 1.345
    oracle_sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.reg not in REGS:
            raise ValueError(f"reg must be one of {REGS}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.huber_c > 0:
            raise ValueError("huber_c must be > 0")
        if self.kind == "mm-oracle-scale" and not (self.oracle_sigma and self.oracle_sigma > 0):
            raise ValueError("mm-oracle-scale needs a positive oracle_sigma")

    def __call__(self, A, y):
        return solve_baseline(A, y, self).x_hat


def lasso_lars(A, y, lam):
    """Exact minimizer of ||y - A x||^2 + lam * ||x||_1 from the LARS-lasso path.

    The path is piecewise linear in the penalty, so stopping it at
    lam / (2m) (the scaling used by ``lars_path``) is exact up to rounding.
    Coordinate descent stalls on badly conditioned designs at small lam,
    which is why the homotopy is used here. Returns ``(x, kkt)`` with kkt
    from ``lasso_kkt_violation``.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    m, n = A.shape
    _, _, coefs = lars_path(A, y, method="lasso", alpha_min=lam / (2.0 * m),
                            max_iter=50 * n)
    x = coefs[:, -1].copy()
    # variables leaving the active set can keep a rounding-level residue
    x[np.abs(x) <= 1e-12 * np.abs(x).max(initial=0.0)] = 0.0
    return x, lasso_kkt_violation(A, y, x, lam)


def lasso_kkt_violation(A, y, x, lam):
    """Largest violation of the lasso optimality conditions, relative to lam / 2.

    At the optimum A_j^T r = lam/2 sign(x_j) on the support and
    |A_j^T r| <= lam/2 elsewhere.
    """
    half = 0.5 * lam
    g = A.T @ (y - A @ x)
    on = x != 0
    viol = np.where(on, np.abs(g - half * np.sign(x)), np.maximum(np.abs(g) - half, 0.0))
    return float(viol.max(initial=0.0) / max(half, np.finfo(float).tiny))


def solve_ls(A, y, reg="none", lam=0.0) -> EstimateResult:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = A.shape[1]
    diag = {}
    if reg == "none" or (reg == "l2" and lam == 0.0):
        G = A.T @ A
        try:
            cf = linalg.cho_factor(G, check_finite=False)
        except linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                "A^T A is singular; use reg='l2' or reg='l1' with lam > 0") from None
        x = linalg.cho_solve(cf, A.T @ y)
    elif reg == "l2":
        x = linalg.solve(A.T @ A + lam * np.eye(n), A.T @ y, assume_a="pos")
    elif reg == "l1":
        x, kkt = lasso_lars(A, y, lam)
        diag = {"kkt_violation": kkt}
    else:
        raise ValueError(f"reg must be one of {REGS}")
    r = y - A @ x
    obj = float(r @ r) + (lam if reg != "none" else 0.0) * penalty(x, reg)
    return EstimateResult(x_hat=x, objective=obj, residuals=r, sigma_tau=None, diagnostics=diag)


def mad_scale(r) -> float:
    r = np.asarray(r, dtype=float)
    return float(np.median(np.abs(r - np.median(r))) / MAD_CONSISTENCY)


def m_objective(A, y, x, sigma, rho: ScoreFunction, reg, lam):
    r = y - A @ x
    return float(sigma ** 2 * np.mean(rho.rho(r / sigma))) + lam * penalty(x, reg)


def m_gradient(A, y, x, sigma, rho: ScoreFunction, reg, lam):
    r = y - A @ x
    g = -(sigma / len(r)) * (A.T @ rho.psi(r / sigma))
    if reg == "l2":
        g = g + 2.0 * lam * x
    elif reg == "l1":
        g = g + lam * np.sign(x)
    return g


def solve_m(A, y, kind="m-huber-mad", reg="none", lam=0.0, huber_c=1.345,
            oracle_sigma=None, xi=1e-10, max_iter=5000) -> EstimateResult:
    """Huber M-estimate at a fixed residual scale.

    ``m-huber-mad`` takes sigma = MAD(LS residuals) / 0.6745;
    ``mm-oracle-scale`` uses the supplied true noise scale.
    """
    spec = BaselineKind(kind, reg, lam, huber_c, oracle_sigma)
    if spec.kind == "ls":
        raise ValueError("solve_m handles the M kinds; use solve_ls for least squares")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    lam = 0.0 if reg == "none" else float(lam)
    x_ls, *_ = linalg.lstsq(A, y, check_finite=False)
    if kind == "m-huber-mad":
        sigma = mad_scale(y - A @ x_ls)
        # an exact fit leaves rounding-level residuals, so compare against the data scale
        if sigma <= 1e-12 * np.abs(y).max(initial=0.0):
            raise DegenerateScaleError("MAD of the LS residuals is zero")
    else:
        sigma = float(oracle_sigma)
    rho = ScoreFunction.huber(huber_c)

    def weights(r):
        u = r / sigma
        z = irls_weight(u, rho.psi(u))
        return z, float(sigma ** 2 * np.mean(rho.rho(u)))

    x0 = x_ls if reg != "l1" else np.where(x_ls == 0.0, 1e-3, x_ls)
    x, iters, conv, hist = penalized_irls(A, y, weights, reg, lam, x0, max_iter, xi)
    r = y - A @ x
    return EstimateResult(x_hat=x, objective=m_objective(A, y, x, sigma, rho, reg, lam),
                          residuals=r, sigma_tau=None, total_irls_iters=iters,
                          converged=conv, history=hist, diagnostics={"sigma": sigma})


def solve_baseline(A, y, spec: BaselineKind) -> EstimateResult:
    if spec.kind == "ls":
        return solve_ls(A, y, spec.reg, spec.lam)
    return solve_m(A, y, spec.kind, spec.reg, spec.lam, spec.huber_c, spec.oracle_sigma)
