"""Linear GMM for the group-specific reduced-form coefficients and the
resulting individual / average treatment effect estimates.

For one group with regressors ``Z`` (n x Z), instruments ``R`` (n x R) and
target ``y``::

    theta = (Z'R W R'Z)^{-1} Z'R W R'y

Writing ``W = L L'`` the normal equations are those of the least squares
problem ``min || L'R'Z theta - L'R'y ||``, which is what gets solved (SVD),
so no matrix is ever inverted explicitly. The two-step weight is
``n (R' diag(e^2) R)^{-1}`` with ``e`` the one-step residuals; with
``R' diag(e^2) R = M M'`` the whitening factor is ``L' = M^{-1}``.

The ``*_batch`` helpers accept arrays with leading batch axes and an
optional row mask; they never raise on singular systems but report a
per-problem ``ok`` flag instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import DesignMatrices, DesignPlan, SplitSpec
from .panel import PanelDataset, TreatmentLayout

__all__ = [
    "EffectEstimates",
    "GmmError",
    "GmmFit",
    "estimate_att",
    "estimate_effects",
    "fit_batch",
    "gmm_step",
    "gmm_two_step",
]

EPS = np.finfo(float).eps
RIDGE_SCALE = 1e-10


class GmmError(RuntimeError):
    """Singular GMM system; ``diagnostics`` carries the condition numbers."""

    def __init__(self, message, diagnostics=None, group=None):
        self.diagnostics = dict(diagnostics or {})
        self.group = group
        if group:
            message = f"[{group}] {message}"
        super().__init__(message)


def _mv(a, v):
    return (a @ v[..., None])[..., 0]


def _moments(z, r, y, mask):
    rt = np.swapaxes(r, -1, -2)
    if mask is not None:
        rt = rt * mask[..., None, :]
    return rt @ z, _mv(rt, y)


def _lstsq(gt, b):
    """Minimum-norm solution of ``gt @ theta = b`` per batch member."""
    u, s, vt = np.linalg.svd(gt, full_matrices=False)
    tol = EPS * max(gt.shape[-2:]) * s[..., 0]
    ok = s[..., -1] > tol
    inv = np.where(s > tol[..., None], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    coef = _mv(np.swapaxes(u, -1, -2), b) * inv
    theta = _mv(np.swapaxes(vt, -1, -2), coef)
    return theta, s[..., -1], ok


def _one_step(rz, ry, weight=None):
    if weight is None:
        return _lstsq(rz, ry)
    lt = np.swapaxes(np.linalg.cholesky(weight), -1, -2)
    return _lstsq(lt @ rz, _mv(lt, ry))


def _moment_cov(r, e2):
    return (np.swapaxes(r, -1, -2) * e2[..., None, :]) @ r


def _regularize(c):
    """Add ``lambda I`` where ``c`` is numerically singular."""
    dim = c.shape[-1]
    w = np.linalg.eigvalsh(c)
    tr = np.trace(c, axis1=-2, axis2=-1)
    bad = (tr <= 0) | (w[..., 0] <= EPS * dim * np.abs(w[..., -1]))
    if bad.any():
        lam = np.where(tr > 0, RIDGE_SCALE * tr / dim, RIDGE_SCALE)
        c = c + np.where(bad, lam, 0.0)[..., None, None] * np.eye(dim)
    return c, bad, np.maximum(w[..., 0], 0.0)


def fit_batch(z, r, y, step: str = "two", mask=None, weight=None):
    """Vectorized GMM.

    Parameters
    ----------
    z, r, y : arrays (..., n, Z), (..., n, R), (..., n)
    step : {"one", "two"}
    mask : array (..., n), optional
        0/1 row weights (used for leave-one-out refits).
    weight : array (..., R, R), optional
        One-step weight; identity when omitted.

    Returns
    -------
    dict with ``theta``, ``ok``, ``ridge``, ``s_min_normal``,
    ``s_min_moment`` and, for two-step fits, ``chol`` (the factor of the
    regularized ``R'UR``) and ``n_eff``.
    """
    rz, ry = _moments(z, r, y, mask)
    theta, smin, ok = _one_step(rz, ry, weight)
    out = {"theta": theta, "ok": ok, "s_min_normal": smin**2, "ridge": np.zeros(ok.shape, bool)}
    if step == "one":
        return out
    if step != "two":
        raise ValueError(f"step must be 'one' or 'two', got {step!r}")
    fit = _mv(z, theta)
    e = y - fit
    # residuals at rounding level are exact zeros (noise-free data)
    e = np.where(np.abs(e) <= 64 * EPS * np.maximum(np.abs(y), np.abs(fit)), 0.0, e)
    e2 = e * e if mask is None else e * e * mask
    c, ridge, cmin = _regularize(_moment_cov(r, e2))
    m = np.linalg.cholesky(c)
    theta2, smin2, ok2 = _lstsq(np.linalg.solve(m, rz), np.linalg.solve(m, ry[..., None])[..., 0])
    n_eff = z.shape[-2] if mask is None else mask.sum(axis=-1)
    out.update(
        theta=theta2, ok=ok & ok2, ridge=ridge, s_min_moment=cmin,
        s_min_normal=smin2**2, theta_first=theta, chol=m, n_eff=n_eff,
    )
    return out


@dataclass
class GmmFit:
    """Result of a single-group GMM fit."""

    theta: np.ndarray
    weight: np.ndarray
    residuals: np.ndarray
    step: str
    group: str | None = None
    condition_diag: dict = field(default_factory=dict)
    ridge: bool = False
    first_weight: np.ndarray | None = None
    theta_first: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {
            "theta": self.theta.tolist(),
            "weight": self.weight.tolist(),
            "residuals": self.residuals.tolist(),
            "step": self.step,
            "group": self.group,
            "condition_diag": {k: float(v) for k, v in self.condition_diag.items()},
            "ridge": bool(self.ridge),
        }
        if self.first_weight is not None:
            d["first_weight"] = self.first_weight.tolist()
        return d


def _check_design(design: DesignMatrices):
    n, zd, rd = design.n, design.z_dim, design.r_dim
    if rd < zd:
        raise GmmError(f"under-identified: R={rd} < Z={zd}")
    if n < zd:
        raise GmmError(f"{n} rows cannot identify {zd} coefficients")


def gmm_step(design: DesignMatrices, weight=None, group: str | None = None) -> GmmFit:
    """One GMM solve with weight ``weight`` (identity by default)."""
    _check_design(design)
    w = np.eye(design.r_dim) if weight is None else np.asarray(weight, dtype=float)
    if w.shape != (design.r_dim, design.r_dim):
        raise ValueError(f"weight must be {design.r_dim}x{design.r_dim}")
    if not np.allclose(w, w.T, rtol=1e-10, atol=1e-12):
        raise ValueError("weight must be symmetric")
    try:
        res = fit_batch(design.z, design.r_mat, design.y, step="one", weight=None if weight is None else w)
    except np.linalg.LinAlgError as exc:
        raise ValueError("weight must be positive definite") from exc
    diag = {"s_min_normal": float(res["s_min_normal"])}
    if not res["ok"]:
        raise GmmError("Z'RWR'Z is singular", diag, group)
    theta = res["theta"]
    return GmmFit(theta, w, design.y - design.z @ theta, "one", group, diag)


def gmm_two_step(design: DesignMatrices, group: str | None = None) -> GmmFit:
    """Two-step efficient GMM with heteroskedasticity-robust weight."""
    _check_design(design)
    res = fit_batch(design.z, design.r_mat, design.y, step="two")
    diag = {
        "s_min_normal": float(res["s_min_normal"]),
        "s_min_moment": float(res["s_min_moment"]),
    }
    if not res["ok"]:
        raise GmmError("two-step normal matrix is singular", diag, group)
    m = res["chol"]
    eye = np.eye(design.r_dim)
    minv = np.linalg.solve(m, eye)
    weight = design.n * (minv.T @ minv)
    theta = res["theta"]
    return GmmFit(
        theta, weight, design.y - design.z @ theta, "two", group, diag,
        ridge=bool(res["ridge"]), first_weight=eye, theta_first=res["theta_first"],
    )


def fit_design(design: DesignMatrices, step: str = "two", group: str | None = None) -> GmmFit:
    if step == "two":
        return gmm_two_step(design, group)
    if step == "one":
        return gmm_step(design, group=group)
    raise ValueError(f"step must be 'one' or 'two', got {step!r}")


@dataclass
class EffectEstimates:
    """Individual effects for every individual plus their mean.

    ``ite`` has one entry per panel row; for imputation-based ATT estimates
    it is NaN for control rows.
    """

    ite: np.ndarray
    ate: float
    target: tuple
    split: SplitSpec | None
    fit_treated: GmmFit | None
    fit_control: GmmFit | None
    ids: tuple = ()
    treated_mask: np.ndarray | None = None
    estimator: str = "gmm"
    members: tuple = ()

    @property
    def att(self) -> float:
        return float(np.mean(self.ite[self.treated_mask]))

    @property
    def itt(self) -> np.ndarray:
        return self.ite[self.treated_mask]

    def to_dict(self) -> dict:
        d = {
            "estimator": self.estimator,
            "target": list(self.target),
            "ate": float(self.ate),
            "att": self.att if self.treated_mask is not None else None,
            "ids": list(self.ids),
            "ite": [None if np.isnan(v) else float(v) for v in self.ite],
        }
        if self.split is not None:
            d["split"] = self.split.to_dict()
        if self.fit_treated is not None:
            d["fit_treated"] = self.fit_treated.to_dict()
        if self.fit_control is not None:
            d["fit_control"] = self.fit_control.to_dict()
        return d

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.to_dict(), **kw)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "tau_hat"])
            for i, v in zip(self.ids, self.ite):
                w.writerow([i, repr(float(v))])
        return path


def _fit_group(plan, data, layout, group, step):
    rows = layout.rows(group)
    z, r, y = plan.assemble(data.outcomes[rows], data.covariates[rows])
    return fit_design(DesignMatrices(z, r, y, rows), step, group)


def estimate_effects(
    data: PanelDataset, layout: TreatmentLayout, split: SplitSpec, step: str = "two"
) -> EffectEstimates:
    """GMM individual effects ``Z_i'(theta1 - theta0)`` for all individuals."""
    if split.target.period <= layout.t0:
        raise ValueError(f"target {split.target} is not a posttreatment cell")
    plan = DesignPlan.compile(data, layout, split)
    fit1 = _fit_group(plan, data, layout, "treated", step)
    fit0 = _fit_group(plan, data, layout, "control", step)
    z_all = plan.regressors(data.outcomes, data.covariates)
    ite = z_all @ (fit1.theta - fit0.theta)
    return EffectEstimates(
        ite, float(ite.mean()), tuple(split.target), split, fit1, fit0,
        data.ids, layout.is_treated,
    )


def estimate_att(
    data: PanelDataset, layout: TreatmentLayout, split: SplitSpec, step: str = "two"
) -> EffectEstimates:
    """Effects on the treated by imputing the untreated outcome.

    ``tau_i = Y_i - Z_i' theta0`` for treated ``i``; only the control-group
    coefficients are estimated, so this works with very few treated units.
    """
    if split.target.period <= layout.t0:
        raise ValueError(f"target {split.target} is not a posttreatment cell")
    plan = DesignPlan.compile(data, layout, split)
    fit0 = _fit_group(plan, data, layout, "control", step)
    tr = layout.treated_ids
    z_tr = plan.regressors(data.outcomes[tr], data.covariates[tr])
    y_tr = data.outcomes[tr, plan.target[0], plan.target[1]]
    ite = np.full(data.n_individuals, np.nan)
    ite[tr] = y_tr - z_tr @ fit0.theta
    return EffectEstimates(
        ite, float(np.mean(ite[tr])), tuple(split.target), split, None, fit0,
        data.ids, layout.is_treated, estimator="gmm-impute",
    )


def ite_batch(plan: DesignPlan, outcomes, covariates, layout: TreatmentLayout, step="two"):
    """Individual effects for a stack of outcome tensors (B, N, T, K).

    Returns ``(ite, ok)`` with shapes (B, N) and (B,).
    """
    tr, co = layout.treated_ids, layout.control_ids
    z1, r1, y1 = plan.assemble(outcomes[..., tr, :, :], covariates[tr])
    z0, r0, y0 = plan.assemble(outcomes[..., co, :, :], covariates[co])
    f1 = fit_batch(z1, r1, y1, step)
    f0 = fit_batch(z0, r0, y0, step)
    z_all = plan.regressors(outcomes, covariates)
    ite = _mv(z_all, f1["theta"] - f0["theta"])
    return ite, f1["ok"] & f0["ok"]


def itt_batch(plan: DesignPlan, outcomes, covariates, layout: TreatmentLayout, step="two"):
    """Imputation effects on the treated for a stack of outcome tensors.

    Returns ``(itt, ok)`` with shapes (B, N1) and (B,).
    """
    tr, co = layout.treated_ids, layout.control_ids
    z0, r0, y0 = plan.assemble(outcomes[..., co, :, :], covariates[co])
    f0 = fit_batch(z0, r0, y0, step)
    z_tr = plan.regressors(outcomes[..., tr, :, :], covariates[tr])
    y_tr = outcomes[..., tr, plan.target[0], plan.target[1]]
    itt = y_tr - _mv(z_tr, f0["theta"])
    return itt, f0["ok"]
