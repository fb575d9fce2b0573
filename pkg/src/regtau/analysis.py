"""
Robustness and efficiency diagnostics for the regularized tau estimator.

Population quantities are expectations over a discrete weighted sample of
(a, y) pairs. For a Gaussian design and Gaussian errors the sample is a
tensor Gauss-Hermite rule, so "population" results are deterministic
quadratures; an empirical sample with equal weights gives the plug-in
versions. A point-mass contamination is just one extra weighted atom, which
makes the definition of the influence function directly computable.

Notation: r = y - a x, u = r / sigma_M(x), and the population score

    S(x) = E[psi_tau(u) sigma_M(x) a],

which is minus the gradient of sigma_tau^2(x). A penalized population
estimate solves S(x) = lam J'(x).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import optimize

from .score import DegenerateWeightsError, TauScores, default_scores
from .solver import REGS, SolverConfig, TauProblem, penalty, solve_fast

L1_ACTIVE_TOL = 1e-10


class PopulationError(RuntimeError):
    """A population fixed point could not be located."""


# --------------------------------------------------------------------------
# weighted samples


@dataclass(frozen=True)
class WeightedSample:
    """Atoms (a_i, y_i) with weights p_i. Weights may be signed; they sum to 1."""

    a: np.ndarray  # (N, n)
    y: np.ndarray  # (N,)
    p: np.ndarray  # (N,)

    @property
    def n(self):
        return self.a.shape[1]

    @classmethod
    def empirical(cls, A, y):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        return cls(A, y, np.full(y.size, 1.0 / y.size))

    def contaminate(self, eps, a0, y0) -> "WeightedSample":
        """(1 - eps) * self + eps * delta_(a0, y0)."""
        a0 = np.asarray(a0, dtype=float).reshape(1, self.n)
        return WeightedSample(np.vstack([self.a, a0]), np.append(self.y, float(y0)),
                              np.append((1.0 - eps) * self.p, eps))


def gaussian_population(x0, order=40, noise_sd=1.0) -> WeightedSample:
    """Tensor Gauss-Hermite rule for a ~ N(0, I_n), e ~ N(0, noise_sd^2), y = a x0 + e.

    The rule has order**(n+1) atoms; keep n small.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    t, wt = hermegauss(order)
    wt = wt / wt.sum()
    grids = np.meshgrid(*([t] * (n + 1)), indexing="ij")
    pw = np.meshgrid(*([wt] * (n + 1)), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    p = np.prod(np.stack([g.ravel() for g in pw], axis=1), axis=1)
    a = nodes[:, :n]
    e = noise_sd * nodes[:, n]
    return WeightedSample(a, a @ x0 + e, p)


# --------------------------------------------------------------------------
# population scale, score and its derivative chain


def population_m_scale(P: WeightedSample, r, scores: TauScores) -> float:
    """sigma with sum_i p_i rho1(r_i / sigma) = b, by bracketing in log sigma."""
    rho1, b = scores.rho1, scores.b

    def gap(log_s):
        return float(P.p @ rho1.rho(r / np.exp(log_s))) - b

    scale = float(np.sqrt(P.p @ (r * r))) if np.all(P.p >= 0) else float(np.abs(r).max())
    if not scale > 0:
        raise PopulationError("all residuals are zero")
    lo, hi = np.log(scale) - 2.0, np.log(scale) + 2.0
    for _ in range(60):
        if gap(lo) > 0:
            break
        lo -= 2.0
    for _ in range(60):
        if gap(hi) < 0:
            break
        hi += 2.0
    return float(np.exp(optimize.brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)))


@dataclass
class PopulationState:
    """Everything the score and its Jacobian need at one x."""

    x: np.ndarray
    r: np.ndarray
    sigma: float
    u: np.ndarray
    w: float
    psi_tau: np.ndarray
    num: float  # E[2 rho2 - psi2 u]
    den: float  # E[psi1 u]


def population_state(P: WeightedSample, x, scores: TauScores) -> PopulationState:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = scores
    r = P.y - P.a @ x
    sigma = population_m_scale(P, r, s)
    u = r / sigma
    den = float(P.p @ (s.rho1.psi(u) * u))
    if not den > 0:
        raise DegenerateWeightsError("E[psi1(u) u] is not positive")
    num = float(P.p @ (2.0 * s.rho2.rho(u) - s.rho2.psi(u) * u))
    w = num / den
    return PopulationState(x, r, sigma, u, w, w * s.rho1.psi(u) + s.rho2.psi(u), num, den)


def population_score(P: WeightedSample, x, scores: TauScores = None) -> np.ndarray:
    """S(x) = E[psi_tau(u) sigma_M a] = -grad sigma_tau^2(x)."""
    st = population_state(P, x, scores or default_scores())
    return st.sigma * (P.a.T @ (P.p * st.psi_tau))


def population_objective(P: WeightedSample, x, reg="none", lam=0.0, scores=None) -> float:
    s = scores or default_scores()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r = P.y - P.a @ x
    sigma = population_m_scale(P, r, s)
    return sigma ** 2 * float(P.p @ s.rho2.rho(r / sigma)) + lam * penalty(x, reg)


def scale_gradient(P: WeightedSample, st: PopulationState, scores: TauScores):
    """d sigma_M / dx = -sigma E[psi1(u) a] / E[psi1(u) r]."""
    psi1 = scores.rho1.psi(st.u)
    return -st.sigma * (P.a.T @ (P.p * psi1)) / float(P.p @ (psi1 * st.r))


def standardized_residual_gradient(P: WeightedSample, st: PopulationState, dsigma):
    """du_i / dx = -a_i / sigma - u_i dsigma / sigma, one row per atom."""
    return -(P.a + np.outer(st.u, dsigma)) / st.sigma


def weight_gradient(P: WeightedSample, st: PopulationState, du, scores: TauScores):
    """dw / dx for w = E[2 rho2 - psi2 u] / E[psi1 u] (total derivative through u)."""
    rho1, rho2 = scores.rho1, scores.rho2
    u = st.u
    # d(2 rho2 - psi2 u)/du = psi2 - psi2' u ; d(psi1 u)/du = psi1' u + psi1
    dnum = (P.p * (rho2.psi(u) - rho2.psi_prime(u) * u)) @ du
    dden = (P.p * (rho1.psi_prime(u) * u + rho1.psi(u))) @ du
    return (dnum * st.den - st.num * dden) / st.den ** 2


def psi_tau_gradient(st: PopulationState, du, dw, scores: TauScores):
    """d psi_tau(u_i) / dx = psi1 dw + (w psi1' + psi2') du_i."""
    u = st.u
    slope = st.w * scores.rho1.psi_prime(u) + scores.rho2.psi_prime(u)
    return np.outer(scores.rho1.psi(u), dw) + slope[:, None] * du


def scaled_score_gradient(P: WeightedSample, st: PopulationState, scores: TauScores):
    """d(psi_tau(u_i) sigma_M) / dx for every atom, shape (N, n)."""
    dsigma = scale_gradient(P, st, scores)
    du = standardized_residual_gradient(P, st, dsigma)
    dw = weight_gradient(P, st, du, scores)
    dpsi = psi_tau_gradient(st, du, dw, scores)
    return st.sigma * dpsi + np.outer(st.psi_tau, dsigma)


def score_jacobian(P: WeightedSample, x, scores: TauScores = None) -> np.ndarray:
    """dS/dx = E[a (d(psi_tau sigma_M)/dx)^T], assembled from the chain above."""
    s = scores or default_scores()
    st = population_state(P, x, s)
    return P.a.T @ (P.p[:, None] * scaled_score_gradient(P, st, s))


def score_jacobian_fd(P: WeightedSample, x, scores: TauScores = None, h=1e-6) -> np.ndarray:
    """Central finite differences of S(x), column by column."""
    s = scores or default_scores()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = h
        cols.append((population_score(P, x + step, s) - population_score(P, x - step, s))
                    / (2 * h))
    return np.stack(cols, axis=1)


# --------------------------------------------------------------------------
# population estimate


def _penalty_grad(x, reg, lam):
    if reg == "l2":
        return 2.0 * lam * x
    if reg == "l1":
        return lam * np.sign(x)
    return np.zeros_like(x)


def _estimate_1d(P, reg, lam, s, bracket):
    lo, hi = bracket

    def f(x, sign=None):
        # stationarity residual -S(x) + lam J'(x); sign fixes sign(x) for l1
        g = -population_score(P, [x], s)[0]
        if reg == "l2":
            g += 2.0 * lam * x
        elif reg == "l1":
            g += lam * sign
        return g

    def root(sign, a, b):
        fa, fb = f(a, sign), f(b, sign)
        if fa * fb > 0:
            raise PopulationError(f"no sign change of the first-order condition on [{a}, {b}]")
        return optimize.brentq(f, a, b, args=(sign,), xtol=1e-14, rtol=4 * np.finfo(float).eps)

    if reg != "l1":
        return np.array([root(None, lo, hi)])
    s0 = population_score(P, [0.0], s)[0]
    if abs(s0) <= lam:
        return np.array([0.0])
    # S decreases through x_hat; the nonzero root lies on the side of S(0)
    return np.array([root(1.0, 0.0, hi) if s0 > 0 else root(-1.0, lo, 0.0)])


def _estimate_nd(P, reg, lam, s, x_init, tol, max_iter):
    """Proximal gradient with backtracking, then Newton polish on the active set."""
    x = np.array(x_init, dtype=float)

    def smooth(v):
        return population_objective(P, v, "none", 0.0, s) + (lam * v @ v if reg == "l2" else 0.0)

    def grad(v):
        return -population_score(P, v, s) + (2.0 * lam * v if reg == "l2" else 0.0)

    def prox(v, t):
        if reg == "l1":
            return np.sign(v) * np.maximum(np.abs(v) - t * lam, 0.0)
        return v

    t = 1.0
    for _ in range(max_iter):
        g = grad(x)
        f0 = smooth(x)
        while True:
            x_new = prox(x - t * g, t)
            d = x_new - x
            if smooth(x_new) <= f0 + g @ d + (d @ d) / (2 * t) or t < 1e-12:
                break
            t *= 0.5
        x, t = x_new, min(2.0 * t, 1e3)
        if np.linalg.norm(d) < 1e-10:
            break
    active = np.abs(x) > 0 if reg == "l1" else np.ones(x.size, bool)
    for _ in range(50):
        F = (-population_score(P, x, s) + _penalty_grad(x, reg, lam))[active]
        if np.max(np.abs(F), initial=0.0) < tol:
            break
        Jm = -score_jacobian(P, x, s)
        if reg == "l2":
            Jm += 2.0 * lam * np.eye(x.size)
        x[active] -= np.linalg.solve(Jm[np.ix_(active, active)], F)
    return x


def population_estimate(P: WeightedSample, reg="none", lam=0.0, scores=None, x_init=None,
                        bracket=None, tol=1e-11, max_iter=5000) -> np.ndarray:
    """Minimizer of sigma_tau^2(x) + lam J(x) under the weighted sample P.

    One-dimensional problems use bracketing root finding on the first-order
    condition (the l1 case first checks whether 0 satisfies the subgradient
    condition); larger ones use proximal gradient plus a Newton polish.
    ``bracket`` defaults to x_init +- 5.
    """
    if reg not in REGS:
        raise ValueError(f"reg must be one of {REGS}")
    s = scores or default_scores()
    lam = 0.0 if reg == "none" else float(lam)
    if x_init is None:
        x_init = np.linalg.lstsq(P.a * np.sqrt(np.abs(P.p))[:, None],
                                 P.y * np.sqrt(np.abs(P.p)), rcond=None)[0]
    x_init = np.atleast_1d(np.asarray(x_init, dtype=float))
    if P.n == 1:
        c = float(x_init[0])
        return _estimate_1d(P, reg, lam, s, bracket or (c - 5.0, c + 5.0))
    return _estimate_nd(P, reg, lam, s, x_init, tol, max_iter)


# --------------------------------------------------------------------------
# influence function


@dataclass(frozen=True)
class ContaminationPoint:
    a0: tuple
    y0: float

    def __post_init__(self):
        a0 = tuple(float(v) for v in np.atleast_1d(self.a0))
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "y0", float(self.y0))
        if not (np.all(np.isfinite(a0)) and np.isfinite(self.y0)):
            raise ValueError("contamination point must be finite")

    @property
    def a(self):
        return np.array(self.a0)


@dataclass(frozen=True)
class GaussianModel:
    """y = a x0 + e with a ~ N(0, I), e ~ N(0, noise_sd^2), and one estimator setting."""

    x0: tuple = (1.5,)
    reg: str = "none"
    lam: float = 0.0
    noise_sd: float = 1.0
    order: int = 40
    scores: TauScores = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.reg not in REGS:
            raise ValueError(f"reg must be one of {REGS}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.scores is None:
            object.__setattr__(self, "scores", default_scores())

    @property
    def n(self):
        return len(self.x0)

    def population(self) -> WeightedSample:
        return gaussian_population(self.x0, self.order, self.noise_sd)

    def estimate(self, P: WeightedSample | None = None) -> np.ndarray:
        return population_estimate(P or self.population(), self.reg, self.lam, self.scores,
                                   x_init=np.array(self.x0))

    def sample(self, m, rng):
        A = rng.standard_normal((m, self.n))
        return A, A @ np.array(self.x0) + self.noise_sd * rng.standard_normal(m)

    def estimator(self, cfg: SolverConfig = SolverConfig()):
        def estimate(A, y):
            return solve_fast(TauProblem(A, y, self.reg, self.lam, self.scores), cfg).x_hat
        return estimate


def _contamination_terms(P, st, pt, s):
    """eps-derivatives at eps = 0 that act through sigma_M and w directly (x held fixed).

    Returns (dsigma, dpsi_tau) with dpsi_tau one entry per atom.
    """
    u, u0 = st.u, (pt.y0 - pt.a @ st.x) / st.sigma
    rho1, rho2 = s.rho1, s.rho2
    # (1 - eps) E[rho1(r / sigma)] + eps rho1(u0) = b
    dsigma = st.sigma * (rho1.rho(u0) - float(P.p @ rho1.rho(u))) / st.den
    du = -u * dsigma / st.sigma
    dnum = (2 * rho2.rho(u0) - rho2.psi(u0) * u0 - st.num
            + float(P.p @ ((rho2.psi(u) - rho2.psi_prime(u) * u) * du)))
    dden = (rho1.psi(u0) * u0 - st.den
            + float(P.p @ ((rho1.psi_prime(u) * u + rho1.psi(u)) * du)))
    dw = (dnum * st.den - st.num * dden) / st.den ** 2
    dpsi = rho1.psi(u) * dw + (st.w * rho1.psi_prime(u) + rho2.psi_prime(u)) * du
    return dsigma, dpsi


def influence_function(P: WeightedSample, x_hat, pt: ContaminationPoint, reg="none", lam=0.0,
                       scores=None, form="theorem") -> np.ndarray:
    """Influence function at the population estimate x_hat.

    form="theorem" evaluates

        none / l2:  (-E[a d(psi_tau sigma)/dx] + lam J'')^-1 (psi_tau(u0) sigma a0 - S(x_hat))
        l1:         the same system restricted to the nonzero coordinates of
                    x_hat, without penalty curvature, and exactly 0 elsewhere,

    with sigma_M, w and all expectations taken under P. This treats sigma_M
    and w as functions of x only.

    form="complete" adds the terms where the contamination moves sigma_M and
    w at fixed x. They vanish when the population residual is independent
    of a (the unpenalized Gaussian case) but not under a penalty, where
    x_hat is biased. This form matches ``influence_function_numeric``.
    """
    if form not in ("theorem", "complete"):
        raise ValueError("form must be 'theorem' or 'complete'")
    s = scores or default_scores()
    st, H, active = _if_system(P, x_hat, reg, lam, s)
    return _if_solve(H, active, _if_rhs(P, st, pt, s, form))


def _if_system(P, x_hat, reg, lam, s):
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=float))
    st = population_state(P, x_hat, s)
    H = -P.a.T @ (P.p[:, None] * scaled_score_gradient(P, st, s))
    if reg == "l2":
        H = H + 2.0 * lam * np.eye(x_hat.size)
    active = np.abs(x_hat) > L1_ACTIVE_TOL if reg == "l1" else np.ones(x_hat.size, bool)
    return st, H, active


def _if_rhs(P, st, pt, s, form):
    u0 = (pt.y0 - pt.a @ st.x) / st.sigma
    psi0 = st.w * s.rho1.psi(u0) + s.rho2.psi(u0)
    rhs = psi0 * st.sigma * pt.a - st.sigma * (P.a.T @ (P.p * st.psi_tau))
    if form == "complete":
        dsigma, dpsi = _contamination_terms(P, st, pt, s)
        rhs = rhs + P.a.T @ (P.p * (st.sigma * dpsi + st.psi_tau * dsigma))
    return rhs


def _if_solve(H, active, rhs):
    out = np.zeros(rhs.size)
    if active.any():
        out[active] = np.linalg.solve(H[np.ix_(active, active)], rhs[active])
    return out


def influence_function_1d(model: GaussianModel, pt: ContaminationPoint, form="theorem") -> float:
    """Scalar influence function for a one-dimensional Gaussian model."""
    if model.n != 1:
        raise ValueError("influence_function_1d needs a one-dimensional model")
    P = model.population()
    x_hat = model.estimate(P)
    return float(influence_function(P, x_hat, pt, model.reg, model.lam, model.scores, form)[0])


def influence_function_numeric(P: WeightedSample, pt: ContaminationPoint, reg="none", lam=0.0,
                               scores=None, eps=1e-5, x_hat=None) -> np.ndarray:
    """Central difference in eps of the estimate under (1 - eps) P + eps delta_pt.

    Every eps-dependence is kept, including the one through sigma_M and w.
    """
    s = scores or default_scores()
    if x_hat is None:
        x_hat = population_estimate(P, reg, lam, s)
    est = []
    for e in (eps, -eps):
        Pe = P.contaminate(e, pt.a, pt.y0)
        est.append(population_estimate(Pe, reg, lam, s, x_init=x_hat))
    return (est[0] - est[1]) / (2 * eps)


# --------------------------------------------------------------------------
# sensitivity curves and grids


def sensitivity_curve(A, y, pt: ContaminationPoint, estimator, x_base=None) -> np.ndarray:
    """(m + 1) * (x_hat(A + a0, y + y0) - x_hat(A, y)).

    ``estimator(A, y) -> x_hat`` must be deterministic; ``x_base`` may pass a
    precomputed x_hat(A, y).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    m = y.size
    if m == 0:
        raise ValueError("sensitivity curve needs a nonempty base sample")
    if pt.a.size != A.shape[1]:
        raise ValueError("a0 has the wrong dimension")
    if x_base is None:
        x_base = estimator(A, y)
    x_plus = estimator(np.vstack([A, pt.a]), np.append(y, pt.y0))
    return (m + 1) * (np.asarray(x_plus) - np.asarray(x_base))


@dataclass
class RobustnessReport:
    """SC or IF values on an (a0, y0) grid; ``values[i, j]`` belongs to (a0[i], y0[j])."""

    kind: str
    a0: np.ndarray
    y0: np.ndarray
    values: np.ndarray  # (len(a0), len(y0), n)

    def sup_over_y0(self):
        """max_j |value(a0_i, y0_j)| per a0 and coordinate, shape (len(a0), n)."""
        return np.max(np.abs(self.values), axis=1)

    def rows(self):
        for i, a in enumerate(self.a0):
            for j, yv in enumerate(self.y0):
                for k, v in enumerate(self.values[i, j]):
                    yield {"kind": self.kind, "a0": float(a), "y0": float(yv), "coord": k,
                           "value": float(v)}


def _pts(a0_grid, y0_grid):
    return [[ContaminationPoint((a,), yv) for yv in y0_grid] for a in a0_grid]


def if_grid(model: GaussianModel, a0_grid, y0_grid, form="theorem") -> RobustnessReport:
    """Influence function of a one-dimensional model on a grid (a0 scalar)."""
    if model.n != 1:
        raise ValueError("grids are only defined for one-dimensional models")
    P = model.population()
    x_hat = model.estimate(P)
    vals = np.array([[influence_function(P, x_hat, pt, model.reg, model.lam, model.scores, form)
                      for pt in row] for row in _pts(a0_grid, y0_grid)])
    return RobustnessReport("if", np.asarray(a0_grid, float), np.asarray(y0_grid, float), vals)


def sc_grid(model: GaussianModel, a0_grid, y0_grid, m=1000, seed=0,
            cfg: SolverConfig = SolverConfig()) -> RobustnessReport:
    """Sensitivity curve on a grid from one base sample of size m.

    The base sample and the solver seed are fixed, so every fit in the grid
    uses the same restarts and differences isolate the added point.
    """
    if model.n != 1:
        raise ValueError("grids are only defined for one-dimensional models")
    A, y = model.sample(m, np.random.default_rng(seed))
    est = model.estimator(cfg)
    x_base = est(A, y)
    vals = np.array([[sensitivity_curve(A, y, pt, est, x_base) for pt in row]
                     for row in _pts(a0_grid, y0_grid)])
    return RobustnessReport("sc", np.asarray(a0_grid, float), np.asarray(y0_grid, float), vals)


# --------------------------------------------------------------------------
# Monte Carlo variance and bias


@dataclass(frozen=True)
class MCStat:
    """A Monte Carlo estimate with its standard error."""

    value: np.ndarray
    se: np.ndarray
    replicates: int


def simulate_estimates(model: GaussianModel, m, replicates, estimator=None, seed=0) -> np.ndarray:
    """Estimates from ``replicates`` independent size-m samples, one row each.

    Replicate i uses ``SeedSequence(seed).spawn(replicates)[i]`` for both the
    data and (through its first state word) the solver seed.
    """
    if replicates < 2:
        raise ValueError("need at least 2 replicates")
    out = []
    for seq in np.random.SeedSequence(seed).spawn(replicates):
        rng = np.random.default_rng(seq)
        A, y = model.sample(m, rng)
        est = estimator or model.estimator(SolverConfig(seed=int(seq.generate_state(1)[0])))
        out.append(np.atleast_1d(est(A, y)))
    return np.array(out)


def asv_from_estimates(x_hats, m) -> MCStat:
    """m * sample variance (ddof=1) per coordinate; SE from the chi-square approximation."""
    x_hats = np.atleast_2d(np.asarray(x_hats, dtype=float))
    R = x_hats.shape[0]
    val = m * x_hats.var(axis=0, ddof=1)
    return MCStat(val, val * np.sqrt(2.0 / (R - 1)), R)


def bias_from_estimates(x_hats, x0) -> MCStat:
    x_hats = np.atleast_2d(np.asarray(x_hats, dtype=float))
    R = x_hats.shape[0]
    return MCStat(x_hats.mean(axis=0) - np.asarray(x0, float),
                  x_hats.std(axis=0, ddof=1) / np.sqrt(R), R)


def asv_estimate(model: GaussianModel, m=5000, replicates=300, estimator=None, seed=0) -> MCStat:
    return asv_from_estimates(simulate_estimates(model, m, replicates, estimator, seed), m)


def bias_estimate(model: GaussianModel, m=5000, replicates=300, estimator=None, seed=0) -> MCStat:
    return bias_from_estimates(simulate_estimates(model, m, replicates, estimator, seed), model.x0)


def asymptotic_variance(model: GaussianModel, form="complete") -> np.ndarray:
    """E[IF IF^T] under the model, by quadrature over the model's own atoms.

    With form="complete" this is the limit of m Var(x_hat_m) that
    ``asv_estimate`` measures by simulation.
    """
    P = model.population()
    x_hat = model.estimate(P)
    s = model.scores
    st, H, active = _if_system(P, x_hat, model.reg, model.lam, s)
    V = np.zeros((model.n, model.n))
    for a_i, y_i, p_i in zip(P.a, P.y, P.p):
        f = _if_solve(H, active, _if_rhs(P, st, ContaminationPoint(a_i, y_i), s, form))
        V += p_i * np.outer(f, f)
    return V
