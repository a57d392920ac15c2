"""OLS comparator under a linear conditional mean assumption.

Same regressors as the GMM estimator, but each group's coefficients come
from least squares of the target on ``Z`` with the instruments ignored.
The resulting contrast ``Z_i'(b1 - b0)`` estimates a conditional average
effect given ``Z_i`` rather than the individual effect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import DesignPlan, SplitSpec
from .gmm import EffectEstimates, GmmError
from .panel import PanelDataset, TreatmentLayout

__all__ = ["LcmFit", "estimate_lcm", "ols", "ols_batch"]

EPS = np.finfo(float).eps


def ols_batch(z, y):
    """Least squares per batch member via SVD; returns ``(beta, s_min, ok)``."""
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    tol = EPS * max(z.shape[-2:]) * s[..., 0]
    ok = s[..., -1] > tol
    inv = np.where(s > tol[..., None], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    coef = (np.swapaxes(u, -1, -2) @ y[..., None])[..., 0] * inv
    beta = (np.swapaxes(vt, -1, -2) @ coef[..., None])[..., 0]
    return beta, s[..., -1], ok


def ols(z, y, group=None) -> np.ndarray:
    beta, smin, ok = ols_batch(np.asarray(z, float), np.asarray(y, float))
    if not ok:
        raise GmmError("Z'Z is rank deficient", {"s_min": float(smin) ** 2}, group)
    return beta


@dataclass
class LcmFit:
    theta_star_treated: np.ndarray
    theta_star_control: np.ndarray
    cate: np.ndarray
    ate: float
    split: SplitSpec
    ids: tuple = ()
    treated_mask: np.ndarray | None = None

    def as_effects(self) -> EffectEstimates:
        return EffectEstimates(
            self.cate, self.ate, tuple(self.split.target), self.split, None, None,
            self.ids, self.treated_mask, estimator="lcm",
        )

    def to_dict(self) -> dict:
        d = self.as_effects().to_dict()
        d["theta_star_treated"] = self.theta_star_treated.tolist()
        d["theta_star_control"] = self.theta_star_control.tolist()
        return d


def estimate_lcm(data: PanelDataset, layout: TreatmentLayout, split: SplitSpec) -> LcmFit:
    plan = DesignPlan.compile(data, layout, split)
    thetas = []
    for g in ("treated", "control"):
        rows = layout.rows(g)
        z, _, y = plan.assemble(data.outcomes[rows], data.covariates[rows])
        thetas.append(ols(z, y, g))
    z_all = plan.regressors(data.outcomes, data.covariates)
    cate = z_all @ (thetas[0] - thetas[1])
    return LcmFit(thetas[0], thetas[1], cate, float(cate.mean()), split, data.ids, layout.is_treated)


def cate_batch(plan: DesignPlan, outcomes, covariates, layout: TreatmentLayout):
    """OLS contrasts for a stack of outcome tensors; ``(cate, ok)``."""
    tr, co = layout.treated_ids, layout.control_ids
    z1, _, y1 = plan.assemble(outcomes[..., tr, :, :], covariates[tr])
    z0, _, y0 = plan.assemble(outcomes[..., co, :, :], covariates[co])
    b1, _, ok1 = ols_batch(z1, y1)
    b0, _, ok0 = ols_batch(z0, y0)
    z_all = plan.regressors(outcomes, covariates)
    return (z_all @ (b1 - b0)[..., None])[..., 0], ok1 & ok0
