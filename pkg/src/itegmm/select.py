"""Leave-one-out selection of the regressor cells and equal-weight model
averaging across splits of the same size."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .design import DesignError, DesignPlan, SplitSpec, _cell, enumerate_splits, max_feasible_p
from .gmm import EffectEstimates, estimate_effects, fit_batch
from .panel import PanelDataset, TreatmentLayout

__all__ = [
    "LooResult",
    "SelectionReport",
    "estimate_averaged",
    "loo_mse",
    "loo_predictions",
    "select_model",
]

GROUPS = ("treated", "control")


@dataclass
class LooResult:
    """Leave-one-out predictions for the selected individuals of both groups."""

    rows: np.ndarray  # panel row of each left-out individual
    observed: np.ndarray
    predicted: np.ndarray
    n_refits: dict
    failed: int = 0

    @property
    def errors(self) -> np.ndarray:
        return self.observed - self.predicted

    @property
    def mse(self) -> float:
        return float(np.mean(self.errors**2))


def loo_subsample(layout: TreatmentLayout, subsample: int, rng=None, groups=GROUPS) -> dict:
    """Panel rows to leave out, per group. ``subsample=0`` means everyone."""
    out = {}
    for g in groups:
        rows = layout.rows(g)
        if subsample and subsample < rows.size:
            rng = rng if rng is not None else np.random.default_rng(0)
            rows = np.sort(rng.choice(rows, size=subsample, replace=False))
        out[g] = rows
    return out


def _loo_group(plan, data, rows_group, left_out, step):
    z, r, y = plan.assemble(data.outcomes[rows_group], data.covariates[rows_group])
    if rows_group.size - 1 < plan.z_dim:
        raise DesignError(
            f"group of {rows_group.size} too small to drop one and fit {plan.z_dim} coefficients"
        )
    pos = np.searchsorted(rows_group, left_out)
    mask = np.ones((pos.size, rows_group.size))
    mask[np.arange(pos.size), pos] = 0.0
    fit = fit_batch(z, r, y, step, mask=mask)
    pred = np.einsum("lz,lz->l", z[pos], fit["theta"])
    return y[pos], pred, fit["ok"]


def loo_predictions(
    data: PanelDataset,
    layout: TreatmentLayout,
    split: SplitSpec,
    step: str = "two",
    subsample: int = 0,
    rng=None,
    left_out: dict | None = None,
    groups=GROUPS,
) -> LooResult:
    """Refit each group without individual ``i`` and predict ``i``'s target.

    Treated individuals are predicted from treated-group coefficients and
    controls from control-group coefficients. ``groups=("control",)``
    scores the controls only, which is what imputation-style estimators
    with very few treated units need.
    """
    plan = DesignPlan.compile(data, layout, split)
    if left_out is None:
        left_out = loo_subsample(layout, subsample, rng, groups)
    rows, obs, pred, refits, failed = [], [], [], {}, 0
    for g in left_out:
        if left_out[g].size == 0:
            refits[g] = 0
            continue
        o, p, ok = _loo_group(plan, data, layout.rows(g), left_out[g], step)
        failed += int((~ok).sum())
        rows.append(left_out[g][ok])
        obs.append(o[ok])
        pred.append(p[ok])
        refits[g] = int(left_out[g].size)
    return LooResult(np.concatenate(rows), np.concatenate(obs), np.concatenate(pred), refits, failed)


def loo_mse(data, layout, split, step="two", subsample=0, rng=None, groups=GROUPS) -> float:
    """Mean squared leave-one-out prediction error pooled over the groups."""
    return loo_predictions(data, layout, split, step, subsample, rng, groups=groups).mse


@dataclass
class SelectionReport:
    per_p: dict
    best_p: int
    best_split: SplitSpec
    mode: str
    loo_subsample: int
    criterion: float

    def to_dict(self) -> dict:
        per_p = {}
        for p, rec in self.per_p.items():
            per_p[str(p)] = {
                "splits": [s.to_dict() for s in rec["splits"]],
                "mse": [float(v) for v in rec["mse"]],
                "best_split": rec["best_split"].to_dict(),
                "averaged_mse": float(rec["averaged_mse"]),
            }
        return {
            "mode": self.mode,
            "best_p": self.best_p,
            "best_split": self.best_split.to_dict(),
            "criterion": self.criterion,
            "loo_subsample": self.loo_subsample,
            "per_p": per_p,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def summary_rows(self) -> list:
        """(p, n_splits, best-split MSE, averaged MSE) per candidate size."""
        return [
            (p, len(rec["splits"]), float(min(rec["mse"])), float(rec["averaged_mse"]))
            for p, rec in sorted(self.per_p.items())
        ]


def select_model(
    data: PanelDataset,
    layout: TreatmentLayout,
    target,
    p_range=None,
    max_splits: int = 50,
    mode: str = "best-set",
    step: str = "two",
    subsample: int | None = None,
    rng=None,
    splits: dict | None = None,
    groups=GROUPS,
    **split_kw,
) -> SelectionReport:
    """Pick the number and identity of regressor cells by leave-one-out MSE.

    ``mode="best-set"`` minimizes over every evaluated split;
    ``mode="averaging"`` scores each size by the MSE of the prediction
    averaged across that size's splits. ``splits`` may supply the
    candidate lists per size directly. ``groups`` restricts which groups
    are left out and scored. Extra keywords (e.g. ``exclude_same_period``)
    are passed to every generated :class:`SplitSpec`.
    """
    if mode not in ("best-set", "averaging"):
        raise ValueError(f"mode must be 'best-set' or 'averaging', got {mode!r}")
    target = _cell(target)
    rng = rng if rng is not None else np.random.default_rng(0)
    if subsample is None:
        subsample = 100
    left_out = loo_subsample(layout, subsample, rng, groups)
    if splits is None:
        if p_range is None:
            p_range = range(1, max_feasible_p(data, layout, target, **split_kw) + 1)
        splits = {}
        for p in p_range:
            try:
                splits[p] = enumerate_splits(data, layout, target, p, max_splits, rng, **split_kw)
            except DesignError:
                continue
    if not splits:
        raise DesignError(f"no feasible split for target {target}")

    per_p = {}
    for p, cands in splits.items():
        mses, preds, ref = [], [], None
        for s in cands:
            res = loo_predictions(data, layout, s, step, left_out=left_out)
            if res.failed:
                mses.append(np.inf)
                continue
            mses.append(res.mse)
            preds.append(res.predicted)
            ref = res
        if ref is None:
            continue
        avg = float(np.mean((ref.observed - np.mean(preds, axis=0)) ** 2))
        j = int(np.argmin(mses))
        per_p[p] = {"splits": list(cands), "mse": mses, "best_split": cands[j], "averaged_mse": avg}
    if not per_p:
        raise DesignError(f"every candidate split failed for target {target}")

    if mode == "best-set":
        best_p = min(per_p, key=lambda p: (min(per_p[p]["mse"]), p))
        crit = float(min(per_p[best_p]["mse"]))
    else:
        best_p = min(per_p, key=lambda p: (per_p[p]["averaged_mse"], p))
        crit = float(per_p[best_p]["averaged_mse"])
    n_left = int(sum(v.size for v in left_out.values()))
    return SelectionReport(per_p, best_p, per_p[best_p]["best_split"], mode, n_left, crit)


def estimate_averaged(
    data: PanelDataset,
    layout: TreatmentLayout,
    target,
    p: int | None = None,
    max_splits: int = 50,
    step: str = "two",
    rng=None,
    splits: list | None = None,
) -> EffectEstimates:
    """Equal-weight average of the individual effects over splits of size ``p``."""
    if splits is None:
        splits = enumerate_splits(data, layout, _cell(target), p, max_splits, rng)
    members = [estimate_effects(data, layout, s, step) for s in splits]
    ite = np.mean([m.ite for m in members], axis=0)
    first = members[0]
    return EffectEstimates(
        ite, float(ite.mean()), first.target, None, None, None, data.ids,
        layout.is_treated, estimator="gmm-averaged", members=tuple(members),
    )
