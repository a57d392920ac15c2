"""Interactive fixed effects and synthetic control baselines.

Both estimate effects on the treated by imputing the treated units'
untreated outcome in a posttreatment cell. Periods and outcomes are
stacked into ``T*K`` "cells" in period-major order, so cell ``(t, k)``
(1-based) sits in column ``(t - 1) * K + (k - 1)``.

The solvers are written for a leading batch axis so the Monte Carlo lab
can run many replications at once; the public single-panel functions are
thin wrappers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .design import CellIndex, _cell
from .gmm import EffectEstimates
from .panel import PanelDataset, TreatmentLayout

__all__ = [
    "IfeFit",
    "ScmWeights",
    "ife_att",
    "ife_fit",
    "ife_itt_batch",
    "scm_att",
    "scm_fit",
    "scm_itt_batch",
    "simplex_lsq",
]


def _stack(outcomes):
    """(..., N, T, K) -> (..., N, T*K)."""
    return outcomes.reshape(outcomes.shape[:-2] + (-1,))


def _col(cell, n_outcomes):
    c = _cell(cell)
    return (c.period - 1) * n_outcomes + (c.outcome - 1)


def _default_target(data, layout):
    return CellIndex(layout.t0 + 1, data.n_outcomes)


def _varying_covariates(x):
    """Indices of covariates that change over time for at least one unit."""
    if x.shape[2] == 0:
        return np.array([], dtype=int)
    return np.flatnonzero(np.any(x != x[:, :1, :], axis=(0, 1)))


# ---------------------------------------------------------------------------
# interactive fixed effects


@dataclass
class IfeFit:
    """Factor model fit on the control units.

    ``factors`` is (T*K, f) with ``F'F / (T*K) = I``; ``loadings`` covers
    all N units, with treated rows estimated from their pretreatment cells
    only. ``alpha`` holds the cell effects (zeros if disabled).
    """

    beta: np.ndarray
    factors: np.ndarray
    loadings: np.ndarray
    alpha: np.ndarray
    n_factors: int
    converged: bool
    iterations: int
    objective_path: list
    covariate_columns: tuple = ()

    def fitted(self, covariates) -> np.ndarray:
        """Untreated outcome fit, (N, T*K)."""
        x = _stack_cov(covariates[:, :, list(self.covariate_columns)], len(self.alpha))
        xb = x @ self.beta if self.beta.size else 0.0
        return xb + self.alpha + self.loadings @ self.factors.T

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "factors": self.factors.tolist(),
            "loadings": self.loadings.tolist(),
            "alpha": self.alpha.tolist(),
            "n_factors": self.n_factors,
            "converged": self.converged,
            "iterations": self.iterations,
            "objective_path": [float(v) for v in self.objective_path],
            "covariate_columns": list(self.covariate_columns),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _stack_cov(x, m):
    """(N, T, r) covariates -> (N, T*K, r), repeating each period over outcomes."""
    n, t, r = x.shape
    return np.repeat(x, m // t, axis=1) if t else np.empty((n, m, r))


def _ife_core(y, x, f, time_effects=True, tol=1e-9, max_iter=1000, keep_path=False):
    """Alternating least squares for ``y = x b + 1 a' + L F' + e``.

    ``y`` is (B, n, m) and ``x`` is (n, m, r), shared across the batch.
    Block one solves for ``(b, a)`` given ``L F'``; block two solves for
    ``(a, L F')`` given ``b`` by column-centering and a truncated SVD.
    Each block is an exact minimizer, so the objective never increases.
    """
    bsz, n, m = y.shape
    r = x.shape[-1]
    xc = x - x.mean(axis=0) if time_effects else x
    xf = xc.reshape(n * m, r)
    if r:
        gram = xf.T @ xf
        if np.linalg.matrix_rank(gram) < r:
            raise np.linalg.LinAlgError("covariates are collinear after removing cell effects")
        gram_inv = np.linalg.inv(gram)

    def center(a):
        return a - a.mean(axis=-2, keepdims=True) if time_effects else a

    def solve_beta(target):
        if not r:
            return np.zeros((bsz, 0))
        rhs = center(target).reshape(bsz, n * m) @ xf
        return rhs @ gram_inv

    low = np.zeros_like(y)
    beta = solve_beta(y)
    path, prev = [], np.full(bsz, np.inf)
    done = np.zeros(bsz, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        w = y - _xb(x, beta)
        alpha = w.mean(axis=1) if time_effects else np.zeros((bsz, m))
        wc = w - alpha[:, None, :]
        if f:
            u, s, vt = np.linalg.svd(wc, full_matrices=False)
            low = (u[..., :f] * s[:, None, :f]) @ vt[:, :f, :]
        obj = np.mean((wc - low) ** 2, axis=(1, 2))
        if keep_path:
            path.append(obj.copy())
        if not r:
            # no slope to update: the first pass is already the exact minimizer
            done[:] = True
            break
        seen = np.isfinite(prev)
        rel = np.where(seen, prev - obj, np.inf) / np.maximum(np.where(seen, prev, 1.0), 1e-300)
        done |= (np.abs(rel) < tol) | (obj < 1e-28)
        prev = obj
        if done.all():
            break
        beta_new = solve_beta(y - low)
        beta = np.where(done[:, None], beta, beta_new)
    if f:
        v = vt[:, :f, :].swapaxes(-1, -2)  # (B, m, f)
        factors = np.sqrt(m) * v
        lam_c = (u[..., :f] * s[:, None, :f]) / np.sqrt(m)
        sign = np.where(lam_c[:, :1, :] < 0, -1.0, 1.0)
        factors, lam_c = factors * sign, lam_c * sign
    else:
        factors = np.zeros((bsz, m, 0))
        lam_c = np.zeros((bsz, n, 0))
    return beta, alpha, factors, lam_c, done, it, path


def _xb(x, beta):
    if x.shape[-1] == 0:
        return 0.0
    return np.einsum("nmr,br->bnm", x, beta)


def _treated_loadings(y_tr, x_tr, beta, alpha, factors, pre_cols):
    """Loadings of treated units from their pretreatment cells, (B, n1, f)."""
    f = factors.shape[-1]
    if f == 0:
        return np.zeros(y_tr.shape[:2] + (0,))
    if len(pre_cols) < f:
        raise ValueError(f"{len(pre_cols)} pretreatment cells cannot identify {f} factors")
    resid = y_tr - _xb(x_tr, beta) - alpha[:, None, :]
    fp = factors[:, pre_cols, :]  # (B, p, f)
    rp = resid[:, :, pre_cols]  # (B, n1, p)
    pinv = np.linalg.pinv(fp)  # (B, f, p)
    return rp @ pinv.swapaxes(-1, -2)


def _ife_prepare(data_x, layout, covariates, m):
    if covariates == "auto":
        cols = _varying_covariates(data_x)
    elif covariates:
        cols = np.arange(data_x.shape[2])
    else:
        cols = np.array([], dtype=int)
    return cols, _stack_cov(data_x[:, :, cols], m)


def ife_fit(
    data: PanelDataset,
    layout: TreatmentLayout,
    f: int,
    tol: float = 1e-9,
    max_iter: int = 1000,
    time_effects: bool = True,
    covariates="auto",
) -> IfeFit:
    """Fit an interactive fixed effects model in the imputation style.

    Factors, cell effects and the common covariate slope come from the
    control units' full series; treated loadings are then regressed from
    the treated units' pretreatment cells. ``covariates="auto"`` drops
    covariates that never vary over time, since their effect cannot be
    separated from a unit loading. Returns the last iterate with
    ``converged=False`` if ``max_iter`` is reached.
    """
    if f < 0:
        raise ValueError("f must be non-negative")
    m = data.n_periods * data.n_outcomes
    cols, x = _ife_prepare(data.covariates, layout, covariates, m)
    y = _stack(data.outcomes)
    co, tr = layout.control_ids, layout.treated_ids
    if f > min(co.size, m):
        raise ValueError(f"f={f} exceeds min(N0, T*K)={min(co.size, m)}")
    beta, alpha, fac, lam_c, done, it, path = _ife_core(
        y[None, co], x[co], f, time_effects, tol, max_iter, keep_path=True
    )
    pre_cols = list(range(layout.t0 * data.n_outcomes))
    lam_t = _treated_loadings(y[None, tr], x[tr], beta, alpha, fac, pre_cols)
    loadings = np.zeros((data.n_individuals, f))
    loadings[co] = lam_c[0]
    loadings[tr] = lam_t[0]
    return IfeFit(
        beta[0], fac[0], loadings, alpha[0], f, bool(done[0]), it,
        [float(p[0]) for p in path], tuple(int(c) for c in cols),
    )


def ife_att(fit: IfeFit, data: PanelDataset, layout: TreatmentLayout, target=None) -> EffectEstimates:
    """Effects on the treated at ``target`` from the IFE counterfactual."""
    target = _cell(target) if target is not None else _default_target(data, layout)
    if target.period <= layout.t0:
        raise ValueError(f"target {target} is not a posttreatment cell")
    j = _col(target, data.n_outcomes)
    tr = layout.treated_ids
    y0 = fit.fitted(data.covariates)[tr, j]
    ite = np.full(data.n_individuals, np.nan)
    ite[tr] = data.outcomes[tr, target.period - 1, target.outcome - 1] - y0
    return EffectEstimates(
        ite, float(np.mean(ite[tr])), tuple(target), None, None, None,
        data.ids, layout.is_treated, estimator="ife",
    )


def ife_itt_batch(outcomes, covariates, layout: TreatmentLayout, f, target, time_effects=True,
                  covariates_mode="auto", tol=1e-9, max_iter=1000):
    """IFE effects on the treated for a stack of outcome tensors (B, N, T, K).

    Returns ``(itt, converged)`` of shapes (B, N1) and (B,).
    """
    target = _cell(target)
    k = outcomes.shape[-1]
    m = outcomes.shape[-2] * k
    cols, x = _ife_prepare(covariates, layout, covariates_mode, m)
    y = _stack(outcomes)
    co, tr = layout.control_ids, layout.treated_ids
    beta, alpha, fac, lam_c, done, _, _ = _ife_core(y[:, co], x[co], f, time_effects, tol, max_iter)
    pre_cols = list(range(layout.t0 * k))
    lam_t = _treated_loadings(y[:, tr], x[tr], beta, alpha, fac, pre_cols)
    j = _col(target, k)
    xb = _xb(x[tr][:, j : j + 1, :], beta)[..., 0] if x.shape[-1] else 0.0
    y0 = xb + alpha[:, None, j] + (lam_t @ fac[:, j, :, None])[..., 0]
    return y[:, tr, j] - y0, done


# ---------------------------------------------------------------------------
# synthetic control


def simplex_lsq(a, b, tol=1e-8, max_iter=10_000, keep_path=False):
    """Minimize ``||b - a w||^2`` over the probability simplex.

    Away-step Frank-Wolfe with exact line search. ``a`` is (B, m, n) and
    ``b`` is (B, m); every problem in the batch is solved independently.
    Stops a problem once its Frank-Wolfe duality gap is below ``tol``.

    Returns a dict with ``w`` (B, n), ``objective``, ``gap``,
    ``iterations`` (per problem), ``converged`` and, if requested,
    ``path`` (list of objective vectors, one per iteration).
    """
    a_all = np.asarray(a, float)
    b_all = np.asarray(b, float)
    bsz, _, n = a_all.shape
    d0 = np.sum((b_all[:, :, None] - a_all) ** 2, axis=1)
    start = np.argmin(d0, axis=1)
    w_all = np.zeros((bsz, n))
    w_all[np.arange(bsz), start] = 1.0
    aw_all = a_all[np.arange(bsz), :, start]
    iters = np.zeros(bsz, dtype=int)
    gap_all = np.full(bsz, np.inf)
    obj_all = np.sum((b_all - aw_all) ** 2, axis=1)
    path = []

    # working set: problems still iterating; re-gathered as it shrinks
    idx = np.arange(bsz)
    a, b, w, aw = a_all, b_all, w_all.copy(), aw_all.copy()

    def flush():
        w_all[idx], aw_all[idx] = w, aw

    for _ in range(max_iter):
        rows = np.arange(idx.size)
        res = b - aw
        obj = np.sum(res**2, axis=1)
        obj_all[idx] = obj
        grad = -2.0 * (np.swapaxes(a, 1, 2) @ res[..., None])[..., 0]
        s = np.argmin(grad, axis=1)
        gw = np.sum(grad * w, axis=1)
        gap = gw - grad[rows, s]
        gap_all[idx] = gap
        if keep_path:
            path.append(obj_all.copy())
        live = gap > tol
        if not live.any():
            break
        if live.sum() < 0.5 * idx.size:
            flush()
            idx, a, b, w, aw = idx[live], a[live], b[live], w[live], aw[live]
            rows, grad, s, gw, gap = rows[: idx.size], grad[live], s[live], gw[live], gap[live]
            live = np.ones(idx.size, dtype=bool)
        g_support = np.where(w > 0, grad, -np.inf)
        v = np.argmax(g_support, axis=1)
        away_gap = grad[rows, v] - gw
        use_fw = gap >= away_gap
        dir_out = np.where(use_fw[:, None], a[rows, :, s] - aw, aw - a[rows, :, v])
        slope = np.where(use_fw, -gap, -away_gap)
        wv = w[rows, v]
        gmax = np.where(use_fw, 1.0, wv / np.maximum(1.0 - wv, 1e-300))
        curv = 2.0 * np.sum(dir_out**2, axis=1)
        step = np.where(curv > 0, -slope / np.where(curv > 0, curv, 1.0), gmax)
        step = np.where(live, np.clip(step, 0.0, gmax), 0.0)
        fw = live & use_fw
        aws = live & ~use_fw
        # Frank-Wolfe: w <- (1-g) w + g e_s ; away: w <- (1+g) w - g e_v
        w[fw] *= (1.0 - step[fw])[:, None]
        w[rows[fw], s[fw]] += step[fw]
        w[aws] *= (1.0 + step[aws])[:, None]
        w[rows[aws], v[aws]] -= step[aws]
        # drop step: the away vertex leaves the support exactly
        drop = aws & (step >= gmax)
        w[rows[drop], v[drop]] = 0.0
        np.clip(w, 0.0, None, out=w)
        aw = aw + step[:, None] * dir_out
        iters[idx] += live
    flush()
    obj_all = np.sum((b_all - aw_all) ** 2, axis=1)
    w_all /= w_all.sum(axis=1, keepdims=True)
    out = {
        "w": w_all, "objective": obj_all, "gap": gap_all,
        "iterations": iters, "converged": gap_all <= tol,
    }
    if keep_path:
        path.append(obj_all)
        out["path"] = path
    return out


@dataclass
class ScmWeights:
    """Synthetic control weights for one treated unit."""

    unit: object
    weights: np.ndarray  # over control units, in layout order
    objective: float
    gap: float
    iterations: int
    converged: bool
    stack: tuple = ()
    objective_path: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "unit": self.unit,
            "weights": self.weights.tolist(),
            "objective": self.objective,
            "gap": self.gap,
            "iterations": self.iterations,
            "converged": self.converged,
            "stack": [list(c) for c in self.stack],
        }


def _stack_cols(data_k, layout, stack):
    if stack is None:
        return [t * data_k + k for t in range(layout.t0) for k in range(data_k)]
    cols = [_col(c, data_k) for c in stack]
    if not cols:
        raise ValueError("stack needs at least one cell")
    return cols


def scm_fit(
    data: PanelDataset,
    layout: TreatmentLayout,
    treated_unit,
    stack=None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> ScmWeights:
    """Simplex weights on the controls that best reproduce one treated unit.

    ``treated_unit`` is a panel row index or an id. ``stack`` lists the
    (period, outcome) cells to match; the default is every pretreatment
    cell.
    """
    row = treated_unit if isinstance(treated_unit, (int, np.integer)) else data.index_of(treated_unit)
    if not layout.is_treated[row]:
        raise ValueError(f"unit {treated_unit!r} is not treated")
    cols = _stack_cols(data.n_outcomes, layout, stack)
    if stack is not None:
        for c in stack:
            if _cell(c).period > layout.t0:
                raise ValueError(f"stack cell {_cell(c)} is not pretreatment")
    y = _stack(data.outcomes)
    a = y[layout.control_ids][:, cols].T
    sol = simplex_lsq(a[None], y[row, cols][None], tol, max_iter, keep_path=True)
    stack_cells = tuple(CellIndex(c // data.n_outcomes + 1, c % data.n_outcomes + 1) for c in cols)
    return ScmWeights(
        data.ids[row], sol["w"][0], float(sol["objective"][0]), float(sol["gap"][0]),
        int(sol["iterations"][0]), bool(sol["converged"][0]), stack_cells,
        [float(p[0]) for p in sol["path"]],
    )


def scm_att(data: PanelDataset, layout: TreatmentLayout, target=None, stack=None, **kw):
    """Effects on the treated at ``target`` using one synthetic control per
    treated unit. Returns ``(EffectEstimates, [ScmWeights, ...])``."""
    target = _cell(target) if target is not None else _default_target(data, layout)
    if target.period <= layout.t0:
        raise ValueError(f"target {target} is not a posttreatment cell")
    j = _col(target, data.n_outcomes)
    y = _stack(data.outcomes)
    ite = np.full(data.n_individuals, np.nan)
    fits = []
    for row in layout.treated_ids:
        wfit = scm_fit(data, layout, int(row), stack, **kw)
        ite[row] = y[row, j] - y[layout.control_ids, j] @ wfit.weights
        fits.append(wfit)
    tr = layout.treated_ids
    est = EffectEstimates(
        ite, float(np.mean(ite[tr])), tuple(target), None, None, None,
        data.ids, layout.is_treated, estimator="scm",
    )
    return est, fits


def scm_itt_batch(outcomes, layout: TreatmentLayout, target, tol=1e-8, max_iter=10_000):
    """SCM effects on the treated for outcome tensors (B, N, T, K).

    Returns ``(itt, converged)`` of shapes (B, N1) and (B, N1).
    """
    target = _cell(target)
    k = outcomes.shape[-1]
    y = _stack(outcomes)
    bsz = y.shape[0]
    cols = _stack_cols(k, layout, None)
    co, tr = layout.control_ids, layout.treated_ids
    a = y[:, co][:, :, cols].swapaxes(1, 2)  # (B, p, n0)
    a = np.repeat(a, tr.size, axis=0)
    b = y[:, tr][:, :, cols].reshape(bsz * tr.size, len(cols))
    sol = simplex_lsq(a, b, tol, max_iter)
    w = sol["w"].reshape(bsz, tr.size, co.size)
    j = _col(target, k)
    synth = (w @ y[:, co, j][..., None])[..., 0]
    return y[:, tr, j] - synth, sol["converged"].reshape(bsz, tr.size)
