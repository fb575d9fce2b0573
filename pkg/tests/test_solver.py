import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regtau.score import irls_weight, m_scale, psi_tau, w_m
from regtau.solver import (AllRestartsFailedError, SolverConfig, TauProblem, irls_run,
                           random_init, restart_streams, solve_basic, solve_fast, tau_estimator)

from oracles import C1, C2, fd_gradient, grid_min_1d, tau_objective


def problem(seed, m=40, n=5, reg="none", lam=0.0, outliers=0.1):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    x = rng.standard_normal(n)
    y = A @ x + rng.standard_normal(m)
    k = int(outliers * m)
    y[:k] += rng.normal(0, 10, k)
    return TauProblem(A, y, reg, lam), x


def test_problem_validation():
    A = np.ones((3, 2))
    with pytest.raises(ValueError):
        TauProblem(A, np.ones(4))
    with pytest.raises(ValueError):
        TauProblem(A, np.ones(3), "l3")
    with pytest.raises(ValueError):
        TauProblem(A, np.ones(3), "l2", -1.0)
    with pytest.raises(ValueError):
        TauProblem(A, np.array([1.0, np.nan, 0.0]))
    assert TauProblem(A, np.ones(3), "none", 5.0).lam == 0.0


@pytest.mark.parametrize("kw", [dict(Q=0), dict(K=0), dict(M=0), dict(Q=3, M=4), dict(xi=0.0),
                                dict(init_strategy="x"), dict(max_iter=0), dict(n_jobs=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_x0_validation():
    p, _ = problem(0)
    with pytest.raises(ValueError):
        irls_run(p, np.zeros(3))
    with pytest.raises(ValueError):
        irls_run(p, np.full(5, np.inf))


def test_exact_fit_is_fixed_point():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((20, 3))
    x = np.array([1.0, -2.0, 0.5])
    res = irls_run(TauProblem(A, A @ x), x)
    np.testing.assert_array_equal(res.x_hat, x)
    assert res.objective == 0.0 and res.total_irls_iters == 0


def test_objective_matches_oracle_and_fields():
    p, _ = problem(2, reg="l2", lam=0.05)
    res = solve_fast(p, SolverConfig(Q=5, M=2))
    want = tau_objective(p.A, p.y, res.x_hat, C1, C2, 0.5, "l2", 0.05)
    assert res.objective == pytest.approx(want, rel=1e-8)
    recomputed = res.sigma_tau ** 2 + 0.05 * np.sum(res.x_hat ** 2)
    assert res.objective == pytest.approx(recomputed, rel=1e-10)
    np.testing.assert_allclose(res.residuals, p.y - p.A @ res.x_hat)


def test_smooth_gradient_matches_fd():
    p, x = problem(3)
    g = p.smooth_gradient(x)
    fd = fd_gradient(lambda v: p.sigma_tau(v) ** 2, x)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("reg,lam", [("none", 0.0), ("l2", 0.1)])
def test_stationarity(reg, lam):
    for seed in range(5):
        p, _ = problem(seed, reg=reg, lam=lam)
        res = solve_fast(p, SolverConfig(Q=10, M=3, seed=seed))
        assert res.converged
        g = fd_gradient(p.objective, res.x_hat)
        assert np.max(np.abs(g)) < 1e-5 * (1 + abs(res.objective))


def test_l1_subgradient_condition():
    lam = 0.2
    rng = np.random.default_rng(4)
    A = rng.standard_normal((40, 6))
    y = A @ np.array([2, -1.5, 0, 0, 1, 0.0]) + rng.standard_normal(40)
    y[:4] += rng.normal(0, 10, 4)
    p = TauProblem(A, y, "l1", lam)
    res = solve_fast(p, SolverConfig(Q=10, M=3))
    g = fd_gradient(lambda v: p.sigma_tau(v) ** 2, res.x_hat)
    nz = np.abs(res.x_hat) > 1e-6
    assert nz.any() and (~nz).any()
    np.testing.assert_allclose(g[nz], -lam * np.sign(res.x_hat[nz]), atol=1e-4)
    assert np.all(np.abs(g[~nz]) <= lam + 1e-4)


def test_ridge_one_step_with_constant_weights():
    # with all residuals inside the rho1 clip region the first IRLS step is a
    # weighted ridge solve; compare against the closed form with the same weights
    p, _ = problem(5, m=30, n=3, reg="l2", lam=0.2, outliers=0.0)
    x0 = np.zeros(3)
    res = irls_run(p, x0, K=1)
    s = p.scores
    r = p.y
    sm = m_scale(r, s.rho1, s.b).sigma
    u = r / sm
    z = irls_weight(u, psi_tau(u, w_m(u, s.rho1, s.rho2), s.rho1, s.rho2))
    G = p.A.T @ (z[:, None] * p.A) + 0.2 * 30 * np.eye(3)
    np.testing.assert_allclose(res.x_hat, np.linalg.solve(G, p.A.T @ (z * p.y)), rtol=1e-7)


def test_single_restart_equals_irls_run():
    p, _ = problem(6)
    cfg = SolverConfig(Q=1, M=1, seed=11)
    x0 = random_init(p, cfg.init_strategy, restart_streams(11, 1)[0])
    a = solve_basic(p, cfg)
    b = irls_run(p, x0)
    np.testing.assert_array_equal(a.x_hat, b.x_hat)


def test_determinism_and_thread_invariance():
    p, _ = problem(7, reg="l1", lam=0.05)
    a = solve_fast(p, SolverConfig(Q=8, M=3, seed=5))
    b = solve_fast(p, SolverConfig(Q=8, M=3, seed=5))
    c = solve_fast(p, SolverConfig(Q=8, M=3, seed=5, n_jobs=4))
    np.testing.assert_array_equal(a.x_hat, b.x_hat)
    np.testing.assert_array_equal(a.x_hat, c.x_hat)
    assert a.diagnostics["best_restart"] == c.diagnostics["best_restart"]


@pytest.fixture(scope="module")
def hard_problem():
    p, _ = problem(8, m=60, n=20, outliers=0.2)
    return p, solve_basic(p, SolverConfig(Q=500)).objective


def test_fast_close_to_basic_with_longer_first_phase(hard_problem):
    p, basic = hard_problem
    fast = solve_fast(p, SolverConfig(Q=500, K=20))
    assert fast.objective <= basic * 1.01
    assert fast.objective <= min(fast.diagnostics["phase1_objectives"])


@pytest.mark.xfail(strict=True, reason="five IRLS steps do not rank restarts reliably at "
                   "m/n = 3 with 20% outliers; K=20 or M=50 closes the gap")
def test_fast_close_to_basic_at_default_schedule(hard_problem):
    p, basic = hard_problem
    assert solve_fast(p, SolverConfig(Q=500)).objective <= basic * 1.01


def test_regression_equivariance():
    # subsample fits shift with the data, so the restarts are equivariant too;
    # Gaussian starts are not and may settle in a different local minimum
    p, _ = problem(9)
    cfg = SolverConfig(Q=10, M=3, init_strategy="subsample-fit")
    v = np.array([3.0, -1.0, 0.5, 2.0, -4.0])
    a = solve_fast(p, cfg).x_hat
    shifted = TauProblem(p.A, p.y + p.A @ v)
    b = solve_fast(shifted, cfg).x_hat
    # the objective is shift invariant; compare minima rather than restart paths
    assert p.objective(a) == pytest.approx(shifted.objective(a + v), rel=1e-10)
    assert shifted.objective(b) == pytest.approx(p.objective(a), rel=1e-6)
    np.testing.assert_allclose(b, a + v, atol=1e-5)


def test_random_init_distribution():
    p, _ = problem(10, n=4)
    rng = np.random.default_rng(0)
    draws = np.array([random_init(p, "gaussian", rng) for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05)


def test_subsample_init_fits_noiseless_rows():
    rng = np.random.default_rng(12)
    A = rng.standard_normal((15, 3))
    x = rng.standard_normal(3)
    p = TauProblem(A, A @ x)
    np.testing.assert_allclose(random_init(p, "subsample-fit", rng), x, atol=1e-10)


def test_one_dimensional_grid_oracle():
    rng = np.random.default_rng(13)
    A = rng.standard_normal((30, 1))
    y = 1.5 * A[:, 0] + rng.standard_normal(30)
    y[:6] += 15
    for reg, lam in [("none", 0.0), ("l2", 0.1), ("l1", 0.1)]:
        p = TauProblem(A, y, reg, lam)
        res = solve_basic(p)
        _, best = grid_min_1d(lambda v: tau_objective(A, y, v, C1, C2, 0.5, reg, lam))
        assert abs(res.objective - best) <= 1e-4 * best


def test_history_mostly_descends():
    p, _ = problem(14, reg="l2", lam=0.05)
    res = solve_basic(p, SolverConfig(Q=10, M=2))
    h = np.array(res.history)
    assert np.mean(np.diff(h) <= 1e-12 * np.abs(h[:-1]).max()) >= 0.95


def test_all_restarts_failing_raises():
    p = TauProblem(np.zeros((10, 2)), np.arange(10.0))
    with pytest.raises(AllRestartsFailedError) as exc:
        solve_fast(p, SolverConfig(Q=3, M=1))
    assert len(exc.value.diagnostics) == 3


def test_tau_estimator_wrapper():
    p, _ = problem(15)
    est = tau_estimator(cfg=SolverConfig(Q=4, M=2))
    np.testing.assert_array_equal(est(p.A, p.y), solve_fast(p, SolverConfig(Q=4, M=2)).x_hat)
    with pytest.raises(KeyError):
        tau_estimator(algorithm="slow")


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(0.1, 100.0))
def test_scale_equivariance_of_fit(seed, k):
    # subsample fits scale with y, so each restart path scales too
    p, _ = problem(seed, m=25, n=2)
    cfg = SolverConfig(Q=8, M=2, init_strategy="subsample-fit")
    a = solve_fast(p, cfg)
    b = solve_fast(TauProblem(p.A, k * p.y), cfg)
    # the unpenalized objective scales with k^2, so the minimum does too
    assert b.objective == pytest.approx(k * k * a.objective, rel=1e-5)
