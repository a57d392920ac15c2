"""Balanced panel container, treatment layout and long-format CSV I/O.

A panel holds ``K`` outcomes and ``r`` covariates for ``N`` individuals
over ``T`` periods, plus a binary treatment indicator. Treatment must be
absorbing and adopted by every treated individual in the same period.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "PanelDataset",
    "PanelError",
    "Schema",
    "TreatmentLayout",
    "derive_layout",
    "load_panel",
    "load_schema",
    "write_panel",
]


class PanelError(ValueError):
    """Raised when panel data violates a structural requirement."""


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PanelDataset:
    """Dense balanced panel.

    Parameters
    ----------
    outcomes : array, shape (N, T, K)
    covariates : array, shape (N, T, r)
        ``r`` may be zero.
    treatment : array, shape (N, T)
        Binary, absorbing per individual.
    ids : sequence of str, optional
        External individual identifiers, in row order.
    periods : sequence, optional
        External period labels, ascending.
    outcome_names, covariate_names : sequence of str, optional
    """

    outcomes: np.ndarray
    covariates: np.ndarray
    treatment: np.ndarray
    ids: tuple = None
    periods: tuple = None
    outcome_names: tuple = None
    covariate_names: tuple = None

    def __post_init__(self):
        y = _frozen(self.outcomes, float)
        if y.ndim != 3:
            raise PanelError(f"outcomes must be 3-d (N, T, K), got shape {y.shape}")
        n, t, k = y.shape
        x = np.zeros((n, t, 0)) if self.covariates is None else np.asarray(self.covariates, dtype=float)
        if x.size == 0:
            x = np.zeros((n, t, 0))
        x = _frozen(x, float)
        d = _frozen(self.treatment, np.int8)
        if x.ndim != 3 or x.shape[:2] != (n, t):
            raise PanelError(f"covariates shape {x.shape} inconsistent with outcomes {y.shape}")
        if d.shape != (n, t):
            raise PanelError(f"treatment shape {d.shape} inconsistent with outcomes {y.shape}")
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise PanelError("panel contains missing or non-finite values")
        if not np.isin(d, (0, 1)).all():
            raise PanelError("treatment must be binary")
        ids = tuple(str(i) for i in (self.ids if self.ids is not None else range(1, n + 1)))
        periods = tuple(self.periods if self.periods is not None else range(1, t + 1))
        onames = tuple(self.outcome_names or (f"y{j + 1}" for j in range(k)))
        cnames = tuple(self.covariate_names or (f"x{j + 1}" for j in range(x.shape[2])))
        if len(ids) != n or len(set(ids)) != n:
            raise PanelError("ids must be unique and match the number of individuals")
        if len(periods) != t or len(onames) != k or len(cnames) != x.shape[2]:
            raise PanelError("label lengths do not match tensor extents")
        bad = np.nonzero((np.diff(d, axis=1) < 0).any(axis=1))[0]
        if bad.size:
            raise PanelError(f"non-absorbing treatment for id {ids[bad[0]]}")
        for name, value in (
            ("outcomes", y), ("covariates", x), ("treatment", d), ("ids", ids),
            ("periods", periods), ("outcome_names", onames), ("covariate_names", cnames),
        ):
            object.__setattr__(self, name, value)

    @property
    def n_individuals(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.outcomes.shape[2]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    def index_of(self, ident) -> int:
        return self.ids.index(str(ident))

    def with_outcomes(self, outcomes) -> "PanelDataset":
        """Copy of the panel with the outcome tensor replaced."""
        return PanelDataset(
            outcomes, self.covariates, self.treatment, self.ids, self.periods,
            self.outcome_names, self.covariate_names,
        )

    def subset(self, rows) -> "PanelDataset":
        rows = np.asarray(rows)
        return PanelDataset(
            self.outcomes[rows], self.covariates[rows], self.treatment[rows],
            [self.ids[i] for i in rows], self.periods, self.outcome_names,
            self.covariate_names,
        )

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.periods == other.periods
            and self.outcome_names == other.outcome_names
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.treatment, other.treatment)
        )

    __hash__ = None


@dataclass(frozen=True)
class TreatmentLayout:
    """Common adoption structure: periods ``1..t0`` are pretreatment.

    ``treated_ids`` and ``control_ids`` are 0-based row indices.
    """

    t0: int
    treated_ids: np.ndarray
    control_ids: np.ndarray
    n_periods: int = None

    def __post_init__(self):
        object.__setattr__(self, "treated_ids", _frozen(self.treated_ids, np.intp))
        object.__setattr__(self, "control_ids", _frozen(self.control_ids, np.intp))
        if self.treated_ids.size < 1 or self.control_ids.size < 1:
            raise PanelError("need at least one treated and one control individual")
        if np.intersect1d(self.treated_ids, self.control_ids).size:
            raise PanelError("treated and control sets overlap")
        if self.t0 < 1 or (self.n_periods is not None and self.t0 >= self.n_periods):
            raise PanelError(f"t0={self.t0} outside [1, T-1]")

    def __eq__(self, other):
        if not isinstance(other, TreatmentLayout):
            return NotImplemented
        return (
            self.t0 == other.t0
            and self.n_periods == other.n_periods
            and np.array_equal(self.treated_ids, other.treated_ids)
            and np.array_equal(self.control_ids, other.control_ids)
        )

    __hash__ = None

    @property
    def n1(self) -> int:
        return int(self.treated_ids.size)

    @property
    def n0(self) -> int:
        return int(self.control_ids.size)

    def rows(self, group: str) -> np.ndarray:
        if group == "treated":
            return self.treated_ids
        if group == "control":
            return self.control_ids
        if group in ("pooled", "all"):
            return np.sort(np.concatenate([self.treated_ids, self.control_ids]))
        raise ValueError(f"unknown group {group!r}")

    @property
    def is_treated(self) -> np.ndarray:
        n = self.n1 + self.n0
        mask = np.zeros(n, dtype=bool)
        mask[self.treated_ids] = True
        return mask


def derive_layout(data: PanelDataset) -> TreatmentLayout:
    """Read the treatment layout off the treatment tensor."""
    d = data.treatment
    treated = np.nonzero(d[:, -1] == 1)[0]
    if treated.size == 0:
        raise PanelError("no treated individuals")
    # first treated period per treated individual (0-based)
    onset = np.argmax(d[treated] == 1, axis=1)
    if np.unique(onset).size > 1:
        raise PanelError("staggered adoption unsupported")
    control = np.nonzero(d[:, -1] == 0)[0]
    if control.size == 0:
        raise PanelError("no control individuals")
    t0 = int(onset[0])
    if t0 == 0:
        raise PanelError("treatment starts in the first period; no pretreatment data")
    return TreatmentLayout(t0, treated, control, n_periods=data.n_periods)


@dataclass
class Schema:
    """Mapping from CSV column names to panel roles."""

    id: str
    period: str
    treatment: str
    outcomes: list = field(default_factory=list)
    covariates: list = field(default_factory=list)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "Schema":
        """Build from either a role-keyed dict or a column-keyed dict.

        Role-keyed: ``{"id": "pid", "period": "wave", "treatment": "D",
        "outcomes": [...], "covariates": [...]}``. Column-keyed:
        ``{"pid": "id", "y_a": "outcome:1", "age": "covariate:1", ...}``.
        """
        if "outcomes" in mapping or "id" in mapping:
            missing = [r for r in ("id", "period", "treatment", "outcomes") if r not in mapping]
            if missing:
                raise PanelError(f"schema missing role: {missing[0]}")
            return cls(
                mapping["id"], mapping["period"], mapping["treatment"],
                list(mapping["outcomes"]), list(mapping.get("covariates", [])),
            )
        roles: dict = {}
        outcomes: dict = {}
        covariates: dict = {}
        for col, role in mapping.items():
            role = str(role)
            if role in ("id", "period", "treatment"):
                roles[role] = col
            elif role.startswith("outcome:"):
                outcomes[int(role.split(":", 1)[1])] = col
            elif role.startswith("covariate:"):
                covariates[int(role.split(":", 1)[1])] = col
            else:
                raise PanelError(f"unknown schema role {role!r} for column {col!r}")
        for r in ("id", "period", "treatment"):
            if r not in roles:
                raise PanelError(f"schema missing role: {r}")
        if not outcomes:
            raise PanelError("schema missing role: outcome")
        return cls(
            roles["id"], roles["period"], roles["treatment"],
            [outcomes[k] for k in sorted(outcomes)],
            [covariates[k] for k in sorted(covariates)],
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id, "period": self.period, "treatment": self.treatment,
            "outcomes": list(self.outcomes), "covariates": list(self.covariates),
        }


def load_schema(path) -> Schema:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        mapping = tomllib.loads(text)
    else:
        mapping = json.loads(text)
    return Schema.from_mapping(mapping)


def load_panel(path, schema: Schema | dict) -> PanelDataset:
    """Read a long-format CSV (one row per individual-period) into a panel.

    Rows may appear in any order; periods are sorted ascending and
    individuals keep their order of first appearance.
    """
    if isinstance(schema, dict):
        schema = Schema.from_mapping(schema)
    df = pd.read_csv(path, dtype={schema.id: str}, keep_default_na=True, encoding="utf-8",
                     float_precision="round_trip")
    cols = [schema.id, schema.period, schema.treatment, *schema.outcomes, *schema.covariates]
    absent = [c for c in cols if c not in df.columns]
    if absent:
        raise PanelError(f"column {absent[0]!r} named in schema not found in file")
    for col in cols:
        nulls = df[col].isna().to_numpy()
        if nulls.any():
            row = df.loc[nulls].iloc[0]
            raise PanelError(
                f"missing cell (id={row[schema.id]}, period={row[schema.period]}, column={col})"
            )
    if df.duplicated([schema.id, schema.period]).any():
        dup = df.loc[df.duplicated([schema.id, schema.period])].iloc[0]
        raise PanelError(f"duplicate row for id {dup[schema.id]}, period {dup[schema.period]}")

    ids = list(pd.unique(df[schema.id]))
    periods = sorted(pd.unique(df[schema.period]).tolist())
    counts = df.groupby(schema.id, sort=False).size()
    ragged = counts[counts != len(periods)]
    if len(ragged):
        raise PanelError(f"ragged panel: id {ragged.index[0]}")

    id_pos = {v: i for i, v in enumerate(ids)}
    per_pos = {v: t for t, v in enumerate(periods)}
    n, t = len(ids), len(periods)
    ii = df[schema.id].map(id_pos).to_numpy()
    tt = df[schema.period].map(per_pos).to_numpy()
    y = np.empty((n, t, len(schema.outcomes)))
    x = np.empty((n, t, len(schema.covariates)))
    d = np.empty((n, t), dtype=np.int8)
    y[ii, tt] = df[schema.outcomes].to_numpy(dtype=float)
    x[ii, tt] = df[schema.covariates].to_numpy(dtype=float) if schema.covariates else np.empty((len(df), 0))
    dv = df[schema.treatment].to_numpy()
    if not np.isin(dv, (0, 1)).all():
        raise PanelError("treatment column must contain only 0/1")
    d[ii, tt] = dv
    periods = [p.item() if isinstance(p, np.generic) else p for p in periods]
    return PanelDataset(y, x, d, ids, periods, schema.outcomes, schema.covariates)


def default_schema(data: PanelDataset) -> Schema:
    return Schema("id", "period", "treatment", list(data.outcome_names), list(data.covariate_names))


def write_panel(data: PanelDataset, path, schema: Schema | None = None) -> Path:
    """Write the panel as long-format CSV; floats use repr precision so a
    reload reproduces the tensors bit for bit."""
    schema = schema or default_schema(data)
    n, t = data.n_individuals, data.n_periods
    frame = {
        schema.id: np.repeat(np.asarray(data.ids, dtype=object), t),
        schema.period: np.tile(np.asarray(data.periods, dtype=object), n),
        schema.treatment: data.treatment.reshape(-1),
    }
    for j, col in enumerate(schema.outcomes):
        frame[col] = data.outcomes[:, :, j].reshape(-1)
    for j, col in enumerate(schema.covariates):
        frame[col] = data.covariates[:, :, j].reshape(-1)
    path = Path(path)
    pd.DataFrame(frame).to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    return path

