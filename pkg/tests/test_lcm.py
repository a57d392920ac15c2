import json

import numpy as np
import pytest

from itegmm.design import DesignPlan, split_from_cells
from itegmm.gmm import GmmError, estimate_effects
from itegmm.lcm import estimate_lcm, ols
from itegmm.panel import derive_layout
from itegmm.simlab import DgpConfig, run_comparison

from conftest import make_panel, noise_free


def test_constant_effect_noise_free():
    g = np.random.default_rng(0)
    n, c = 40, 0.7
    y = g.normal(size=(n, 2, 3))
    x = g.normal(size=(n, 2, 1))
    y[:, 1, 0] = 1 + 2 * y[:, 0, 0] - y[:, 0, 2] + 0.5 * x[:, 1, 0]
    y[: n // 2, 1, 0] += c
    data = make_panel(y, x)
    fit = estimate_lcm(data, derive_layout(data), split_from_cells([(1, 1), (1, 3)], (2, 1)))
    np.testing.assert_allclose(fit.cate, c, atol=1e-10)
    assert fit.ate == pytest.approx(fit.cate.mean())


def test_agrees_with_gmm_without_noise():
    s = noise_free(seed=4)
    split = split_from_cells([(1, 2), (1, 4)], (2, 3))
    lcm = estimate_lcm(s.data, s.layout, split)
    gmm = estimate_effects(s.data, s.layout, split)
    assert lcm.ate == pytest.approx(gmm.ate, abs=1e-8)


def test_residuals_orthogonal(baseline):
    data, lay = baseline
    split = split_from_cells([(1, 1), (1, 2)], (2, 5))
    fit = estimate_lcm(data, lay, split)
    plan = DesignPlan.compile(data, lay, split)
    for rows, theta in ((lay.treated_ids, fit.theta_star_treated), (lay.control_ids, fit.theta_star_control)):
        z, _, y = plan.assemble(data.outcomes[rows], data.covariates[rows])
        np.testing.assert_allclose(z.T @ (y - z @ theta), 0, atol=1e-10 * np.abs(z).max() * np.abs(y).max() * len(y))


def test_rank_deficient():
    with pytest.raises(GmmError, match="rank deficient"):
        ols(np.ones((5, 2)), np.arange(5.0), "control")


def test_serialization(baseline):
    data, lay = baseline
    fit = estimate_lcm(data, lay, split_from_cells([(1, 1), (1, 2)], (2, 5)))
    d = json.loads(json.dumps(fit.to_dict()))
    assert d["estimator"] == "lcm"
    assert len(d["ite"]) == data.n_individuals
    assert len(d["theta_star_treated"]) == len(d["theta_star_control"])


@pytest.mark.slow
def test_ols_targets_conditional_average_not_individual_effect():
    """OLS bias does not vanish with N while GMM bias stays at Monte Carlo
    noise level (about SD / sqrt(draws))."""
    out = {}
    for n in (100, 400):
        cfg = DgpConfig(n1=n, n0=n, mu_dist="uniform", outer_draws=1)
        out[n] = run_comparison(cfg, ("gmm2", "lcm"), inner_draws=1000, seed=0, p=2)
    for n in (100, 400):
        assert out[n]["gmm2"].ite_bias < 0.05
        assert out[n]["lcm"].ite_bias >= 0.08
    assert out[400]["lcm"].ite_bias >= out[100]["lcm"].ite_bias / 2
