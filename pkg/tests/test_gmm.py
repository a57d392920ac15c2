import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itegmm.design import DesignMatrices, DesignPlan, split_from_cells
from itegmm.gmm import (
    GmmError,
    estimate_att,
    estimate_effects,
    fit_batch,
    gmm_step,
    gmm_two_step,
    ite_batch,
)
from itegmm.panel import derive_layout

from conftest import make_panel, noise_free, sim


def _design(z, r, y):
    z, r, y = (np.asarray(a, float) for a in (z, r, y))
    return DesignMatrices(z, r, y, np.arange(len(y)))


def _random_design(seed, n=50, zd=3, rd=5, noise=1.0):
    g = np.random.default_rng(seed)
    r = g.normal(size=(n, rd))
    z = r[:, :zd] @ g.normal(size=(zd, zd)) + 0.5 * r[:, zd - 1 :].sum(axis=1, keepdims=True) + g.normal(size=(n, zd))
    y = z @ g.normal(size=zd) + noise * g.normal(size=n)
    return _design(z, r, y)


def _pd(g, dim):
    a = g.normal(size=(dim, dim))
    return a @ a.T + dim * np.eye(dim)


def test_proportional_example():
    fit = gmm_step(_design([[1], [2], [3]], [[1], [2], [3]], [2, 4, 6]))
    np.testing.assert_allclose(fit.theta, [2.0])
    np.testing.assert_allclose(fit.residuals, 0, atol=1e-14)


def test_exact_iv():
    g = np.random.default_rng(0)
    z, r, y = g.normal(size=(30, 3)), g.normal(size=(30, 3)), g.normal(size=30)
    fit = gmm_step(_design(z, r, y))
    np.testing.assert_allclose(fit.theta, np.linalg.solve(r.T @ z, r.T @ y), atol=1e-10)


def test_r_equals_z_is_ols():
    g = np.random.default_rng(1)
    z, y = g.normal(size=(40, 4)), g.normal(size=40)
    fit = gmm_step(_design(z, z, y))
    np.testing.assert_allclose(fit.theta, np.linalg.lstsq(z, y, rcond=None)[0], atol=1e-10)


def test_noise_free_recovery():
    g = np.random.default_rng(2)
    z, r = g.normal(size=(50, 3)), g.normal(size=(50, 5))
    theta = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(gmm_step(_design(z, r, z @ theta)).theta, theta, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_weight_scaling_invariance(seed, c):
    d = _random_design(seed)
    w = _pd(np.random.default_rng(seed + 1), d.r_dim)
    a, b = gmm_step(d, w).theta, gmm_step(d, c * w).theta
    np.testing.assert_allclose(a, b, atol=1e-10 * max(1.0, np.abs(a).max()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_exactly_identified_weight_free(seed):
    g = np.random.default_rng(seed)
    d = _random_design(seed, zd=4, rd=4)
    a = gmm_step(d).theta
    b = gmm_step(d, _pd(g, 4)).theta
    np.testing.assert_allclose(a, b, atol=1e-10 * max(1.0, np.abs(a).max()))
    np.testing.assert_allclose(gmm_two_step(d).theta, a, atol=1e-10 * max(1.0, np.abs(a).max()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(3)))
def test_column_permutation_equivariance(seed, perm):
    d = _random_design(seed)
    perm = list(perm)
    dp = _design(d.z[:, perm], d.r_mat, d.y)
    for fit in (gmm_step, gmm_two_step):
        a, b = fit(d).theta, fit(dp).theta
        np.testing.assert_allclose(b, a[perm], atol=1e-9 * max(1.0, np.abs(a).max()))


def test_noise_free_two_step_ridge():
    g = np.random.default_rng(3)
    z, r = g.normal(size=(50, 3)), g.normal(size=(50, 5))
    theta = np.array([1.0, -2.0, 0.5])
    fit = gmm_two_step(_design(z, r, z @ theta))
    assert fit.ridge
    np.testing.assert_allclose(fit.theta, theta, atol=1e-10)


def test_two_step_weight_and_residuals():
    d = _random_design(4, n=80)
    fit = gmm_two_step(d)
    np.testing.assert_allclose(fit.weight, fit.weight.T, atol=1e-10)
    assert np.linalg.eigvalsh(fit.weight).min() > 0
    np.testing.assert_allclose(fit.residuals, d.y - d.z @ fit.theta, atol=0)
    e = d.y - d.z @ fit.theta_first
    w = d.n * np.linalg.inv(d.r_mat.T @ (e[:, None] ** 2 * d.r_mat))
    np.testing.assert_allclose(fit.weight, w, rtol=1e-8)
    rwr = d.z.T @ d.r_mat @ w @ d.r_mat.T
    np.testing.assert_allclose(fit.theta, np.linalg.solve(rwr @ d.z, rwr @ d.y), rtol=1e-8)
    json.loads(json.dumps(fit.to_dict()))


def test_singular_reports_diagnostics():
    z = np.ones((10, 2))
    with pytest.raises(GmmError) as err:
        gmm_step(_design(z, np.random.default_rng(0).normal(size=(10, 3)), np.ones(10)))
    assert "s_min_normal" in err.value.diagnostics


def test_under_identified_design():
    with pytest.raises(GmmError, match="under-identified"):
        gmm_step(_design(np.ones((5, 3)), np.ones((5, 2)), np.ones(5)))


def test_two_step_efficiency():
    """Heteroskedastic over-identified design: two-step is less variable."""
    g = np.random.default_rng(5)
    n, reps = 200, 5000
    r = g.normal(size=(n, 4))
    z = np.column_stack([np.ones(n), r[:, 0] + r[:, 1] + r[:, 2] + 0.5 * g.normal(size=n)])
    ri = np.column_stack([np.ones(n), r])
    scale = 0.2 + 2.0 * np.abs(r[:, 1])
    u = g.normal(size=(reps, n))
    y = z @ np.array([1.0, 2.0]) + scale * (u + 0.5 * (z[:, 1] - r[:, 0] - r[:, 1] - r[:, 2]))
    zb, rb = np.broadcast_to(z, (reps, n, 2)), np.broadcast_to(ri, (reps, n, 5))
    one = fit_batch(zb, rb, y, "one")["theta"][:, 1]
    two = fit_batch(zb, rb, y, "two")["theta"][:, 1]
    assert two.std() <= one.std()


def _two_group_panel():
    """Treated target = 1 + y11, control target = 0.5 + 0.5 y11, exactly."""
    g = np.random.default_rng(6)
    n = 20
    y = np.zeros((n, 2, 2))
    y[:, 0, 0] = g.normal(size=n)
    y[:, 0, 1] = y[:, 0, 0] + g.normal(size=n)
    y[:, 1, 1] = g.normal(size=n)
    y[:n // 2, 1, 0] = 1 + y[:n // 2, 0, 0]
    y[n // 2 :, 1, 0] = 0.5 + 0.5 * y[n // 2 :, 0, 0]
    y[0, 0, 0] = 2.0
    y[0, 1, 0] = 3.0
    return make_panel(y)


def test_effects_arithmetic():
    data = _two_group_panel()
    lay = derive_layout(data)
    est = estimate_effects(data, lay, split_from_cells([(1, 1)], (2, 1)), step="one")
    np.testing.assert_allclose(est.fit_treated.theta, [1, 1], atol=1e-10)
    np.testing.assert_allclose(est.fit_control.theta, [0.5, 0.5], atol=1e-10)
    assert est.ite[0] == pytest.approx(1.5, abs=1e-10)
    assert est.ate == pytest.approx(est.ite.mean(), abs=1e-15)
    assert est.ite.shape == (data.n_individuals,)


def test_zero_effect_noise_free():
    s = noise_free(effect_coef_mean=0.0, effect_coef_sd=0.0)
    est = estimate_effects(s.data, s.layout, split_from_cells([(1, 1), (1, 2)], (2, 5)))
    np.testing.assert_allclose(est.ite, 0, atol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_noise_free_recovers_truth(seed):
    s = noise_free(seed=seed)
    est = estimate_effects(s.data, s.layout, split_from_cells([(1, 1), (1, 2)], (2, 5)))
    np.testing.assert_allclose(est.ite, s.truth[:, 4], atol=1e-8)


def test_batch_matches_single():
    s = sim(30, 30, seed=2)
    split = split_from_cells([(1, 2), (1, 4)], (2, 1))
    plan = DesignPlan.compile(s.data, s.layout, split)
    ys = np.stack([s.data.outcomes, s.data.outcomes[::-1]])
    ite, ok = ite_batch(plan, ys, s.data.covariates, s.layout)
    assert ok.all()
    np.testing.assert_allclose(ite[0], estimate_effects(s.data, s.layout, split).ite, atol=1e-10)


def test_imputation_effects_on_treated():
    s = noise_free(n1=5, n0=60)
    est = estimate_att(s.data, s.layout, split_from_cells([(1, 1), (1, 2)], (2, 5)))
    np.testing.assert_allclose(est.itt, s.truth[s.layout.treated_ids, 4], atol=1e-8)
    assert np.isnan(est.ite[s.layout.control_ids]).all()
    assert est.att == pytest.approx(est.ate)


def test_pretreatment_target_rejected(baseline):
    data, lay = baseline
    with pytest.raises(ValueError, match="not a posttreatment"):
        estimate_effects(data, lay, split_from_cells([(1, 1)], (1, 2)))


def test_serialization(tmp_path, baseline):
    data, lay = baseline
    est = estimate_effects(data, lay, split_from_cells([(1, 1), (1, 3)], (2, 2)))
    d = json.loads(est.to_json())
    assert d["estimator"] == "gmm" and d["target"] == [2, 2]
    assert len(d["ite"]) == data.n_individuals
    assert "theta" in d["fit_treated"] and "weight" in d["fit_control"]
    df = pd.read_csv(est.to_csv(tmp_path / "e.csv"), dtype={"id": str}, float_precision="round_trip")
    assert list(df.columns) == ["id", "tau_hat"]
    np.testing.assert_array_equal(df["tau_hat"].to_numpy(), est.ite)
