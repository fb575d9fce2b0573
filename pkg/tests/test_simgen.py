import numpy as np
import pytest

from regtau.simgen import (EstimatorSpec, ExperimentError, ExperimentSpec, gen_design, gen_truth,
                           gen_measurements, inject_outliers, lambda_unit, make_realization,
                           mse_report, outlier_count, realization_seeds, run_experiment)
from regtau.solver import SolverConfig


@pytest.mark.parametrize("cond", [1.0, 10.0, 1000.0])
def test_design_condition_number(cond):
    A = gen_design(60, 20, cond, np.random.default_rng(0))
    s = np.linalg.svd(A, compute_uv=False)
    assert s[0] / s[-1] == pytest.approx(cond, rel=1e-6)
    # geometric spacing
    np.testing.assert_allclose(np.diff(np.log(s)), -np.log(cond) / 19, atol=1e-8)


def test_design_cond_one_has_orthogonal_columns():
    A = gen_design(30, 5, 1.0, np.random.default_rng(1))
    G = A.T @ A
    np.testing.assert_allclose(G, G[0, 0] * np.eye(5), atol=1e-9 * G[0, 0])


def test_design_errors_and_determinism():
    with pytest.raises(ValueError):
        gen_design(3, 5, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gen_design(5, 3, 0.5, np.random.default_rng(0))
    a = gen_design(60, 20, 10, np.random.default_rng(2))
    b = gen_design(60, 20, 10, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)


def test_truth_sparsity():
    x = gen_truth(20, 0.2, np.random.default_rng(3))
    assert np.count_nonzero(x) == 4
    assert np.count_nonzero(gen_truth(20, 1e-6, np.random.default_rng(3))) == 1
    with pytest.raises(ValueError):
        gen_truth(20, 0.0, np.random.default_rng(3))


def test_measurements_noise_level():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((20_000, 2))
    y = gen_measurements(A, np.ones(2), 2.0, rng)
    assert np.std(y - A.sum(axis=1)) == pytest.approx(2.0, rel=0.03)


def test_outlier_counts():
    y = np.zeros(60)
    rng = np.random.default_rng(5)
    y0, mask = inject_outliers(y, 0.0, 10, rng, np.ones(60))
    np.testing.assert_array_equal(y0, y)
    assert not mask.any()
    for frac in [0.1, 0.2, 0.3, 0.4, 1.0]:
        signal = rng.standard_normal(60)
        y1, mask = inject_outliers(y, frac, 10, rng, signal)
        assert mask.sum() == outlier_count(frac, 60) == round(frac * 60)
        assert np.all((y1 != 0) == mask)
    with pytest.raises(ValueError):
        inject_outliers(y, 1.5, 10, rng, y)


def test_outlier_variance_ratio():
    rng = np.random.default_rng(6)
    pooled = []
    for _ in range(100):
        signal = 3.0 * rng.standard_normal(200)
        y1, mask = inject_outliers(np.zeros(200), 0.5, 10, rng, signal)
        pooled.append(y1[mask] ** 2 / np.var(signal))
    ratio = np.mean(np.concatenate(pooled))
    assert 8 <= ratio <= 12


def test_spec_validation():
    for kw in [dict(m=10, n=20), dict(cond=0.5), dict(x_sparsity=0.0), dict(outlier_fracs=(1.5,)),
               dict(outlier_fracs=()), dict(noise_sd=-1.0), dict(realizations=1)]:
        with pytest.raises(ValueError):
            ExperimentSpec(**kw)
    with pytest.raises(ValueError):
        EstimatorSpec("ridge")
    with pytest.raises(ValueError):
        EstimatorSpec("tau", "l3")


def test_realization_is_pure_function_of_seed():
    spec = ExperimentSpec(realizations=3)
    s1, s2 = realization_seeds(3, 3), realization_seeds(3, 3)
    a = make_realization(spec, s1[1], 0.2)
    b = make_realization(spec, s2[1], 0.2)
    np.testing.assert_array_equal(a.y, b.y)
    # design, truth and clean noise are shared across contamination levels
    c = make_realization(spec, s1[1], 0.0)
    np.testing.assert_array_equal(a.A, c.A)
    np.testing.assert_array_equal(a.y[~a.mask], c.y[~a.mask])


def test_mse_report_identity():
    rng = np.random.default_rng(7)
    xh = rng.standard_normal((50, 4)) + 0.3
    rep = mse_report(xh, np.zeros(4))
    assert rep.mse == pytest.approx(np.mean(np.sum(xh ** 2, axis=1)), rel=1e-12)
    assert rep.mse == pytest.approx(rep.bias_sq + rep.trace_var, abs=1e-10)
    zero = mse_report(np.ones((5, 3)), np.ones(3))
    assert zero.mse == zero.bias_sq == zero.trace_var == 0.0
    with pytest.raises(ValueError):
        mse_report(np.ones((1, 3)), np.ones(3))


def test_ls_mse_matches_covariance_trace():
    spec = ExperimentSpec(outlier_fracs=(0.0,), realizations=300, seed=8)
    rep = run_experiment(spec, [EstimatorSpec("ls")])
    traces = [np.trace(np.linalg.inv(make_realization(spec, s, 0.0).A.T
                                     @ make_realization(spec, s, 0.0).A))
              for s in realization_seeds(spec.seed, spec.realizations)]
    assert rep.mse("ls", 0.0) == pytest.approx(np.mean(traces), rel=0.15)


def test_experiment_deterministic_and_parallel_invariant():
    spec = ExperimentSpec(m=30, n=5, outlier_fracs=(0.0, 0.2), realizations=4, seed=9)
    ests = [EstimatorSpec("tau"), {"kind": "ls", "reg": "l2"}, EstimatorSpec("m-huber-mad", "l1")]
    cfg = SolverConfig(Q=5, M=2)
    a = run_experiment(spec, ests, lambda_grid=(0.01, 0.1), solver_cfg=cfg)
    b = run_experiment(spec, ests, lambda_grid=(0.01, 0.1), solver_cfg=cfg)
    c = run_experiment(spec, ests, lambda_grid=(0.01, 0.1), solver_cfg=cfg, n_jobs=2)
    assert a.rows == b.rows == c.rows
    assert len(a.rows) == 6
    # LS lambda is reported in its own (summed-loss) units
    assert a.row("ls-l2", 0.0)["lambda_best"] in (0.01 * 30, 0.1 * 30)
    for r in a.rows:
        assert r["mse"] == pytest.approx(r["bias_sq"] + r["var"], abs=1e-10)


def test_lambda_unit():
    assert lambda_unit(EstimatorSpec("ls", "l1"), 60) == 60.0
    assert lambda_unit(EstimatorSpec("tau", "l1"), 60) == 1.0


def test_experiment_errors():
    spec = ExperimentSpec(m=10, n=2, outlier_fracs=(0.0,), realizations=2)
    with pytest.raises(ValueError):
        run_experiment(spec, [])
    with pytest.raises(ValueError):
        run_experiment(spec, [EstimatorSpec("ls"), EstimatorSpec("ls")])
    with pytest.raises(ValueError):
        run_experiment(spec, [EstimatorSpec("ls", "l2")], lambda_grid=())


def test_failure_budget(monkeypatch):
    import regtau.simgen as sg

    def broken(*args):
        raise ArithmeticError("boom")

    monkeypatch.setattr(sg, "_estimate", broken)
    spec = ExperimentSpec(m=10, n=2, outlier_fracs=(0.0,), realizations=2)
    with pytest.raises(ExperimentError):
        run_experiment(spec, [EstimatorSpec("ls")])
