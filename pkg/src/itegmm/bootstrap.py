"""Residual bootstrap for individual and average effects.

Every cell of the panel is first fitted with the GMM estimator, giving a
fitted series and a residual series per individual. Synthetic panels are
then built by adding whole residual series, drawn with replacement within
each treatment group, to the fitted series, and the effects are
re-estimated on each with the original split held fixed.

Replicate ``b`` draws from a generator seeded by ``(seed, b)`` and
replicates are processed in fixed-size chunks, so results do not depend
on how many worker threads are used.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .design import CellIndex, DesignError, DesignPlan, SplitSpec, _cell
from .gmm import GmmError, estimate_effects, fit_batch, ite_batch
from .panel import PanelDataset, TreatmentLayout

__all__ = [
    "BootstrapError",
    "BootstrapResult",
    "FittedPanel",
    "bootstrap_effects",
    "classify_significance",
    "fit_all_cells",
    "percentile_interval",
]

CHUNK = 50
MAX_FAIL_SHARE = 0.05
LABELS = ("negative", "none", "positive")


class BootstrapError(RuntimeError):
    pass


@dataclass
class FittedPanel:
    fitted: np.ndarray  # (N, T, K)
    residuals: np.ndarray  # (N, T, K)
    splits: dict  # CellIndex -> SplitSpec
    pretreat_fit: str = "pooled"


def _fit_rows(plan, outcomes, covariates, rows, step):
    z, r, y = plan.assemble(outcomes[rows], covariates[rows])
    fit = fit_batch(z, r, y, step)
    if not fit["ok"]:
        raise GmmError("singular normal matrix", {"s_min": float(fit["s_min_normal"])})
    return z @ fit["theta"]


def fit_all_cells(
    data: PanelDataset,
    layout: TreatmentLayout,
    splits_per_cell: dict | None = None,
    step: str = "two",
    pretreat_fit: str = "pooled",
    p: int | None = None,
    rng=None,
) -> FittedPanel:
    """Fitted values and residuals for every (period, outcome) cell.

    Posttreatment cells are fitted separately in each group. Pretreatment
    cells are fitted on everyone (``pretreat_fit="pooled"``) or on the
    controls only, with those coefficients applied to the treated
    (``"control_only"``). Cells missing from ``splits_per_cell`` get a
    split chosen by leave-one-out selection, restricted to ``p`` regressor
    cells when ``p`` is given.
    """
    if pretreat_fit not in ("pooled", "control_only"):
        raise ValueError("pretreat_fit must be 'pooled' or 'control_only'")
    from .select import select_model

    splits = {_cell(c): s for c, s in (splits_per_cell or {}).items()}
    n, t, k = data.outcomes.shape
    fitted = np.empty((n, t, k))
    tr, co = layout.treated_ids, layout.control_ids
    everyone = np.arange(n)
    for s in range(1, t + 1):
        for q in range(1, k + 1):
            cell = CellIndex(s, q)
            if cell not in splits:
                try:
                    rep = select_model(
                        data, layout, cell, p_range=None if p is None else [p], rng=rng
                    )
                except DesignError as exc:
                    raise DesignError(f"cell {cell}: {exc}") from exc
                splits[cell] = rep.best_split
            split = splits[cell]
            if split.target != cell:
                raise DesignError(f"split for cell {cell} targets {split.target}")
            try:
                plan = DesignPlan.compile(data, layout, split)
                if s > layout.t0:
                    fitted[tr, s - 1, q - 1] = _fit_rows(plan, data.outcomes, data.covariates, tr, step)
                    fitted[co, s - 1, q - 1] = _fit_rows(plan, data.outcomes, data.covariates, co, step)
                elif pretreat_fit == "pooled":
                    fitted[:, s - 1, q - 1] = _fit_rows(plan, data.outcomes, data.covariates, everyone, step)
                else:
                    z, r, y = plan.assemble(data.outcomes[co], data.covariates[co])
                    fit = fit_batch(z, r, y, step)
                    fitted[:, s - 1, q - 1] = plan.regressors(data.outcomes, data.covariates) @ fit["theta"]
            except (DesignError, GmmError) as exc:
                raise type(exc)(f"cell {cell}: {exc}") from exc
    return FittedPanel(fitted, data.outcomes - fitted, splits, pretreat_fit)


def percentile_interval(draws, alpha, axis=0):
    """Order statistics ``ceil(alpha/2 B)`` and ``ceil((1-alpha/2) B)``
    (1-based, clamped to ``[1, B]``) along ``axis``."""
    x = np.sort(np.asarray(draws, float), axis=axis)
    b = x.shape[axis]
    lo = min(max(math.ceil(alpha / 2 * b), 1), b) - 1
    hi = min(max(math.ceil((1 - alpha / 2) * b), 1), b) - 1
    return np.take(x, lo, axis=axis), np.take(x, hi, axis=axis)


@dataclass
class BootstrapResult:
    b: int
    tau_hat: np.ndarray
    ate: float
    ite_draws: np.ndarray  # (B, N)
    ate_draws: np.ndarray  # (B,)
    se_ite: np.ndarray
    se_ate: float
    ci_mode: str
    alpha: float
    ci_ite: np.ndarray  # (N, 2)
    ci_ate: tuple
    significance: np.ndarray
    ids: tuple = ()
    failed: int = 0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_rows(self) -> list:
        return [
            (i, float(t), float(s), float(lo), float(hi), lab)
            for i, t, s, (lo, hi), lab in zip(
                self.ids, self.tau_hat, self.se_ite, self.ci_ite, self.significance
            )
        ]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "tau_hat", "se", "ci_lo", "ci_hi", "significance"])
            for row in self.to_rows():
                w.writerow([row[0], *(repr(v) for v in row[1:5]), row[5]])
        return path

    def to_dict(self, keep_draws: bool = False) -> dict:
        d = {
            "b": self.b,
            "failed": self.failed,
            "seed": self.seed,
            "ci_mode": self.ci_mode,
            "alpha": self.alpha,
            "ate": self.ate,
            "se_ate": self.se_ate,
            "ci_ate": [float(v) for v in self.ci_ate],
            "ids": list(self.ids),
            "tau_hat": self.tau_hat.tolist(),
            "se_ite": self.se_ite.tolist(),
            "ci_ite": self.ci_ite.tolist(),
            "significance": list(self.significance),
            **self.meta,
        }
        if keep_draws:
            d["ite_draws"] = self.ite_draws.tolist()
            d["ate_draws"] = self.ate_draws.tolist()
        return d

    def to_json(self, keep_draws: bool = False, **kw) -> str:
        return json.dumps(self.to_dict(keep_draws), **kw)


def classify_significance(ci, alpha=None) -> np.ndarray:
    """Label each interval ``negative`` (upper < 0), ``positive``
    (lower > 0) or ``none``.

    ``ci`` is an (n, 2) array or a :class:`BootstrapResult`; with a result
    and an ``alpha`` different from its own, the intervals are recomputed
    from the stored draws.
    """
    if isinstance(ci, BootstrapResult):
        res = ci
        if alpha is not None and alpha != res.alpha:
            ci = _intervals(res.ite_draws, res.tau_hat, res.se_ite, res.ci_mode, alpha)
        else:
            ci = res.ci_ite
    ci = np.atleast_2d(np.asarray(ci, float))
    out = np.full(ci.shape[0], "none", dtype=object)
    out[ci[:, 1] < 0] = "negative"
    out[ci[:, 0] > 0] = "positive"
    return out


def _intervals(draws, point, se, mode, alpha):
    if mode == "percentile":
        lo, hi = percentile_interval(draws, alpha)
    else:
        zq = stats.norm.ppf(1 - alpha / 2)
        lo, hi = point - zq * se, point + zq * se
    return np.stack([lo, hi], axis=-1)


def _seed_of(seed):
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2**63))
    return int(seed)


def _replicate_chunk(seed, start, stop, fp, layout, plan, covariates, step):
    """Re-estimate effects for replicates ``start..stop-1``."""
    tr, co = layout.treated_ids, layout.control_ids
    n = fp.fitted.shape[0]
    draw_rows = np.empty((stop - start, n), dtype=np.intp)
    for j, b in enumerate(range(start, stop)):
        g = np.random.default_rng([seed, b])
        draw_rows[j, tr] = tr[g.integers(tr.size, size=tr.size)]
        draw_rows[j, co] = co[g.integers(co.size, size=co.size)]
    ys = fp.fitted[None] + fp.residuals[draw_rows]
    return ite_batch(plan, ys, covariates, layout, step)


def bootstrap_effects(
    data: PanelDataset,
    layout: TreatmentLayout,
    target,
    split: SplitSpec,
    b: int = 600,
    ci_mode: str = "percentile",
    alpha: float = 0.05,
    rng=0,
    step: str = "two",
    fitted: FittedPanel | None = None,
    workers: int = 1,
    splits_per_cell: dict | None = None,
    pretreat_fit: str = "pooled",
) -> BootstrapResult:
    """Bootstrap the individual effects at ``target`` estimated with ``split``.

    ``rng`` is an integer seed (or a Generator, from which one seed is
    drawn). ``fitted`` may carry a precomputed :func:`fit_all_cells`
    result; otherwise it is built here, with ``split`` used for the target
    cell. Replicates whose estimation fails are dropped; more than 5%
    failures raises :class:`BootstrapError`.
    """
    target = _cell(target)
    if ci_mode not in ("percentile", "normal"):
        raise ValueError("ci_mode must be 'percentile' or 'normal'")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if ci_mode == "percentile" and b < 100:
        raise ValueError("percentile intervals need b >= 100")
    if b < 2:
        raise ValueError("b >= 2 required")
    if split.target != target:
        raise DesignError(f"split targets {split.target}, not {target}")
    seed = _seed_of(rng)
    point = estimate_effects(data, layout, split, step)
    if fitted is None:
        cells = dict(splits_per_cell or {})
        cells[target] = split
        fitted = fit_all_cells(data, layout, cells, step, pretreat_fit)
    plan = DesignPlan.compile(data, layout, split)
    bounds = [(s, min(s + CHUNK, b)) for s in range(0, b, CHUNK)]

    def job(bd):
        return _replicate_chunk(seed, bd[0], bd[1], fitted, layout, plan, data.covariates, step)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, bounds))
    else:
        parts = [job(bd) for bd in bounds]
    ite = np.concatenate([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])
    failed = int((~ok).sum())
    if failed > MAX_FAIL_SHARE * b:
        raise BootstrapError(f"{failed} of {b} bootstrap replicates failed")
    ite = ite[ok]
    ate = ite.mean(axis=1)
    se_ite = np.sqrt(np.mean((ite - ite.mean(axis=0)) ** 2, axis=0))
    se_ate = float(np.sqrt(np.mean((ate - ate.mean()) ** 2)))
    ci_ite = _intervals(ite, point.ite, se_ite, ci_mode, alpha)
    ci_ate = tuple(float(v) for v in _intervals(ate[:, None], np.array([point.ate]),
                                                np.array([se_ate]), ci_mode, alpha)[0])
    return BootstrapResult(
        b=int(ok.sum()), tau_hat=point.ite, ate=point.ate, ite_draws=ite, ate_draws=ate,
        se_ite=se_ite, se_ate=se_ate, ci_mode=ci_mode, alpha=alpha, ci_ite=ci_ite,
        ci_ate=ci_ate, significance=classify_significance(ci_ite), ids=data.ids,
        failed=failed, seed=seed,
        meta={"target": list(target), "split": split.to_dict(), "step": step},
    )
