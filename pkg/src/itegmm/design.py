"""Regressor / instrument construction from a split of the outcome cells.

A *cell* is a (period, outcome) pair, 1-based on both axes. For a target
cell, a :class:`SplitSpec` picks some pretreatment cells whose observed
outcomes stand in for the unobserved individual characteristics
(regressors); every other cell except the target becomes an instrument.

Column order is fixed: intercept, covariates of the target period,
covariates of each other regressor period (ascending), then outcome cells
ordered by (period, outcome).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb
from typing import NamedTuple, Sequence

import numpy as np

from .panel import PanelDataset, TreatmentLayout

__all__ = [
    "CellIndex",
    "DesignError",
    "DesignMatrices",
    "DesignPlan",
    "SplitSpec",
    "build_design",
    "enumerate_splits",
    "pretreatment_cells",
]


class DesignError(ValueError):
    pass


class CellIndex(NamedTuple):
    period: int
    outcome: int

    def __str__(self):
        return f"{self.period}:{self.outcome}"

    @classmethod
    def parse(cls, text: str) -> "CellIndex":
        a, b = str(text).split(":")
        return cls(int(a), int(b))


def _cell(c) -> CellIndex:
    if isinstance(c, str):
        return CellIndex.parse(c)
    return CellIndex(int(c[0]), int(c[1]))


@dataclass(frozen=True)
class SplitSpec:
    """Regressor cells for one target cell.

    Parameters
    ----------
    regressor_cells : sequence of (period, outcome)
        Stored sorted; ordering of the input does not matter.
    target : (period, outcome)
    include_intercept : bool
    exclude_same_period : bool
        Drop instrument cells that share the target's period. Off by
        default; same-period outcomes are valid instruments only when the
        shocks are uncorrelated across outcomes.
    """

    regressor_cells: tuple
    target: CellIndex
    include_intercept: bool = True
    exclude_same_period: bool = False

    def __post_init__(self):
        cells = tuple(sorted({_cell(c) for c in self.regressor_cells}))
        target = _cell(self.target)
        object.__setattr__(self, "regressor_cells", cells)
        object.__setattr__(self, "target", target)
        if len(cells) < 1:
            raise DesignError("P >= 1 required")
        if target in cells:
            raise DesignError(f"target cell {target} cannot also be a regressor")

    @property
    def p(self) -> int:
        return len(self.regressor_cells)

    def to_dict(self) -> dict:
        d = {
            "regressor_cells": [list(c) for c in self.regressor_cells],
            "target": list(self.target),
            "intercept": self.include_intercept,
        }
        if self.exclude_same_period:
            d["exclude_same_period"] = True
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            tuple(tuple(c) for c in d["regressor_cells"]),
            tuple(d["target"]),
            bool(d.get("intercept", True)),
            bool(d.get("exclude_same_period", False)),
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class DesignMatrices:
    """Stacked regressors ``z``, instruments ``r_mat`` and target ``y`` for
    one group of individuals (``rows`` gives their panel indices)."""

    z: np.ndarray
    r_mat: np.ndarray
    y: np.ndarray
    rows: np.ndarray
    z_labels: list = field(default_factory=list)
    r_labels: list = field(default_factory=list)

    @property
    def z_dim(self) -> int:
        return self.z.shape[-1]

    @property
    def r_dim(self) -> int:
        return self.r_mat.shape[-1]

    @property
    def n(self) -> int:
        return self.z.shape[-2]


def pretreatment_cells(n_outcomes: int, t0: int, exclude=None) -> list:
    cells = [CellIndex(s, q) for s in range(1, t0 + 1) for q in range(1, n_outcomes + 1)]
    return [c for c in cells if c != exclude]


@dataclass(frozen=True)
class DesignPlan:
    """Column recipe compiled from a split against a panel's dimensions.

    All indices are 0-based. ``assemble`` works on outcome tensors with
    arbitrary leading batch axes, which is what the bootstrap and the
    leave-one-out code use.
    """

    split: SplitSpec
    cov_periods: tuple
    z_cells: tuple
    r_cells: tuple
    target: tuple
    n_covariates: int

    @classmethod
    def compile(cls, data: PanelDataset, layout: TreatmentLayout, split: SplitSpec) -> "DesignPlan":
        T, K = data.n_periods, data.n_outcomes
        for c in (*split.regressor_cells, split.target):
            if not (1 <= c.period <= T and 1 <= c.outcome <= K):
                raise DesignError(f"cell {c} outside panel of {T} periods x {K} outcomes")
        for c in split.regressor_cells:
            if c.period > layout.t0:
                raise DesignError(f"regressor cell {c} is not pretreatment (t0={layout.t0})")
        tgt = (split.target.period - 1, split.target.outcome - 1)
        wanted = [tgt[0]] + sorted({c.period - 1 for c in split.regressor_cells} - {tgt[0]})
        x = data.covariates
        cov_periods = []
        if x.shape[2]:
            for s in wanted:
                # time-invariant covariates would give identical blocks
                if any(np.array_equal(x[:, s], x[:, u]) for u in cov_periods):
                    continue
                cov_periods.append(s)
        z_cells = tuple((c.period - 1, c.outcome - 1) for c in split.regressor_cells)
        taken = set(z_cells) | {tgt}
        r_cells = tuple(
            (s, q) for s in range(T) for q in range(K)
            if (s, q) not in taken and not (split.exclude_same_period and s == tgt[0])
        )
        plan = cls(split, tuple(cov_periods), z_cells, r_cells, tgt, x.shape[2])
        if plan.r_dim < plan.z_dim:
            raise DesignError(
                f"under-identified: add instruments or drop regressor cells "
                f"(Z={plan.z_dim}, R={plan.r_dim})"
            )
        return plan

    @property
    def n_exog(self) -> int:
        return int(self.split.include_intercept) + self.n_covariates * len(self.cov_periods)

    @property
    def z_dim(self) -> int:
        return self.n_exog + len(self.z_cells)

    @property
    def r_dim(self) -> int:
        return self.n_exog + len(self.r_cells)

    def labels(self, data: PanelDataset):
        ex = ["const"] if self.split.include_intercept else []
        for s in self.cov_periods:
            ex += [f"{name}@{s + 1}" for name in data.covariate_names]
        zl = ex + [f"y{q + 1}@{s + 1}" for s, q in self.z_cells]
        rl = ex + [f"y{q + 1}@{s + 1}" for s, q in self.r_cells]
        return zl, rl

    def exog(self, covariates: np.ndarray) -> np.ndarray:
        n = covariates.shape[0]
        parts = [np.ones((n, 1))] if self.split.include_intercept else []
        parts += [covariates[:, s, :] for s in self.cov_periods]
        return np.concatenate(parts, axis=1) if parts else np.empty((n, 0))

    def assemble(self, outcomes: np.ndarray, covariates: np.ndarray):
        """Return ``(z, r, y)`` for ``outcomes`` of shape (..., n, T, K)."""
        ex = self.exog(covariates)
        ex = np.broadcast_to(ex, outcomes.shape[:-3] + ex.shape)
        zs, zq = (np.array(a, dtype=np.intp) for a in zip(*self.z_cells))
        z = np.concatenate([ex, outcomes[..., zs, zq]], axis=-1)
        if self.r_cells:
            rs, rq = (np.array(a, dtype=np.intp) for a in zip(*self.r_cells))
            r = np.concatenate([ex, outcomes[..., rs, rq]], axis=-1)
        else:
            r = ex.copy()
        y = outcomes[..., self.target[0], self.target[1]]
        return z, r, y

    def regressors(self, outcomes: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        ex = self.exog(covariates)
        ex = np.broadcast_to(ex, outcomes.shape[:-3] + ex.shape)
        zs, zq = (np.array(a, dtype=np.intp) for a in zip(*self.z_cells))
        return np.concatenate([ex, outcomes[..., zs, zq]], axis=-1)


def build_design(
    data: PanelDataset, layout: TreatmentLayout, split: SplitSpec, group: str
) -> DesignMatrices:
    """Regressors, instruments and target outcome for one group.

    ``group`` is ``"treated"``, ``"control"`` or ``"pooled"`` (everyone;
    only meaningful for pretreatment targets).
    """
    plan = DesignPlan.compile(data, layout, split)
    rows = layout.rows(group)
    if rows.size == 0:
        raise DesignError(f"group {group!r} is empty")
    z, r, y = plan.assemble(data.outcomes[rows], data.covariates[rows])
    zl, rl = plan.labels(data)
    return DesignMatrices(z, r, y, rows, zl, rl)


def _feasible(data, layout, cells, target, **kw) -> SplitSpec | None:
    split = SplitSpec(tuple(cells), target, **kw)
    try:
        DesignPlan.compile(data, layout, split)
    except DesignError:
        return None
    return split


def enumerate_splits(
    data: PanelDataset,
    layout: TreatmentLayout,
    target,
    p: int,
    max_splits: int = 50,
    rng: np.random.Generator | None = None,
    **split_kw,
) -> list:
    """Candidate splits with ``p`` regressor cells for ``target``.

    Returns every ``p``-subset of the pretreatment cells when there are at
    most ``max_splits`` of them, else ``max_splits`` distinct subsets drawn
    uniformly. Subsets that fail the order condition are discarded.
    """
    target = _cell(target)
    if p < 1:
        raise DesignError("P >= 1 required")
    pool = pretreatment_cells(data.n_outcomes, layout.t0, exclude=target)
    if p > len(pool):
        raise DesignError(f"P={p} exceeds the {len(pool)} available pretreatment cells")
    total = comb(len(pool), p)
    out: list = []
    if total <= max_splits:
        for cells in itertools.combinations(pool, p):
            s = _feasible(data, layout, cells, target, **split_kw)
            if s is not None:
                out.append(s)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        seen: set = set()
        attempts = 0
        while len(out) < max_splits and attempts < 50 * max_splits and len(seen) < total:
            attempts += 1
            pick = tuple(sorted(rng.choice(len(pool), size=p, replace=False).tolist()))
            if pick in seen:
                continue
            seen.add(pick)
            s = _feasible(data, layout, [pool[j] for j in pick], target, **split_kw)
            if s is not None:
                out.append(s)
    if not out:
        raise DesignError(f"no split with P={p} satisfies the order condition for target {target}")
    return out


def max_feasible_p(data: PanelDataset, layout: TreatmentLayout, target, **split_kw) -> int:
    """Largest P for which at least the period-packed split is identified."""
    target = _cell(target)
    pool = pretreatment_cells(data.n_outcomes, layout.t0, exclude=target)
    best = 0
    for p in range(1, len(pool) + 1):
        if _feasible(data, layout, pool[:p], target, **split_kw) is not None:
            best = p
    return best


def split_from_cells(cells: Sequence, target, **kw) -> SplitSpec:
    return SplitSpec(tuple(_cell(c) for c in cells), _cell(target), **kw)
