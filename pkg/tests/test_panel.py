import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itegmm.panel import (
    PanelDataset,
    PanelError,
    Schema,
    derive_layout,
    load_panel,
    load_schema,
    write_panel,
)

SCHEMA = {"id": "pid", "period": "wave", "treatment": "D", "outcomes": ["y1"], "covariates": []}


def _write(tmp_path, rows, cols=("pid", "wave", "D", "y1")):
    path = tmp_path / "p.csv"
    pd.DataFrame(rows, columns=list(cols)).to_csv(path, index=False)
    return path


def test_minimal_file(tmp_path):
    path = _write(tmp_path, [("a", 1, 0, 1.0), ("a", 2, 1, 2.0), ("b", 1, 0, 3.0), ("b", 2, 0, 4.0)])
    data = load_panel(path, SCHEMA)
    assert (data.n_individuals, data.n_periods, data.n_outcomes) == (2, 2, 1)
    assert data.ids == ("a", "b")
    np.testing.assert_array_equal(data.outcomes[:, :, 0], [[1, 2], [3, 4]])


def test_rows_in_any_order_sorted_by_period(tmp_path):
    path = _write(tmp_path, [("b", 2, 0, 4.0), ("a", 2, 1, 2.0), ("b", 1, 0, 3.0), ("a", 1, 0, 1.0)])
    data = load_panel(path, SCHEMA)
    assert data.ids == ("b", "a")
    assert data.periods == (1, 2)
    np.testing.assert_array_equal(data.outcomes[:, :, 0], [[3, 4], [1, 2]])


def test_non_absorbing(tmp_path):
    path = _write(tmp_path, [("1", 1, 1, 1.0), ("1", 2, 0, 2.0), ("2", 1, 0, 3.0), ("2", 2, 0, 4.0)])
    with pytest.raises(PanelError, match="non-absorbing treatment for id 1"):
        load_panel(path, SCHEMA)


def test_ragged(tmp_path):
    path = _write(tmp_path, [("3", 1, 0, 1.0), ("3", 2, 1, 2.0), ("7", 1, 0, 3.0)])
    with pytest.raises(PanelError, match="ragged panel: id 7"):
        load_panel(path, SCHEMA)


def test_missing_cell_named(tmp_path):
    path = _write(tmp_path, [("a", 1, 0, 1.0), ("a", 2, 1, None), ("b", 1, 0, 3.0), ("b", 2, 0, 4.0)])
    with pytest.raises(PanelError, match=r"id=a, period=2, column=y1"):
        load_panel(path, SCHEMA)


def test_schema_missing_role():
    with pytest.raises(PanelError, match="treatment"):
        Schema.from_mapping({"id": "pid", "period": "wave", "outcomes": ["y"]})
    with pytest.raises(PanelError, match="period"):
        Schema.from_mapping({"pid": "id", "D": "treatment", "y": "outcome:1"})


def test_schema_column_keyed_and_toml(tmp_path):
    s = Schema.from_mapping({"pid": "id", "w": "period", "D": "treatment", "b": "outcome:2",
                             "a": "outcome:1", "age": "covariate:1"})
    assert s.outcomes == ["a", "b"] and s.covariates == ["age"]
    p = tmp_path / "s.toml"
    p.write_text('id = "pid"\nperiod = "wave"\ntreatment = "D"\noutcomes = ["y1"]\n')
    assert load_schema(p).to_dict() == {**SCHEMA}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(SCHEMA))
    assert load_schema(p).outcomes == ["y1"]


def test_derive_layout_examples():
    y = np.zeros((2, 2, 1))
    lay = derive_layout(PanelDataset(y, None, [[0, 1], [0, 0]]))
    assert lay.t0 == 1
    assert lay.treated_ids.tolist() == [0] and lay.control_ids.tolist() == [1]
    with pytest.raises(PanelError, match="no treated individuals"):
        derive_layout(PanelDataset(y, None, [[0, 0], [0, 0]]))
    with pytest.raises(PanelError, match="staggered adoption unsupported"):
        derive_layout(PanelDataset(np.zeros((2, 3, 1)), None, [[0, 1, 1], [0, 0, 1]]))


def test_immutable():
    data = PanelDataset(np.zeros((2, 2, 1)), None, [[0, 1], [0, 0]])
    with pytest.raises(ValueError):
        data.outcomes[0, 0, 0] = 1.0


@st.composite
def panels(draw):
    n = draw(st.integers(2, 6))
    t = draw(st.integers(2, 4))
    k = draw(st.integers(1, 3))
    r = draw(st.integers(0, 2))
    t0 = draw(st.integers(1, t - 1))
    n1 = draw(st.integers(1, n - 1))
    seed = draw(st.integers(0, 2**31))
    g = np.random.default_rng(seed)
    d = np.zeros((n, t), int)
    treated = g.permutation(n)[:n1]
    d[treated, t0:] = 1
    y = g.normal(size=(n, t, k)) * 10.0 ** g.integers(-8, 8)
    x = g.normal(size=(n, t, r))
    ids = [f"u{j}" for j in g.permutation(1000)[:n]]
    return PanelDataset(y, x, d, ids)


@settings(max_examples=30, deadline=None)
@given(panels())
def test_round_trip_bit_identical(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "panel.csv"
    write_panel(data, path)
    schema = Schema("id", "period", "treatment", list(data.outcome_names), list(data.covariate_names))
    back = load_panel(path, schema)
    assert back == data
    path2 = path.with_name("again.csv")
    write_panel(back, path2)
    assert path.read_bytes() == path2.read_bytes()


@settings(max_examples=30, deadline=None)
@given(panels(), st.integers(0, 2**31))
def test_layout_permutation_covariant(data, seed):
    perm = np.random.default_rng(seed).permutation(data.n_individuals)
    lay = derive_layout(data)
    lay_p = derive_layout(data.subset(perm))
    assert lay_p.t0 == lay.t0
    assert sorted(perm[lay_p.treated_ids].tolist()) == lay.treated_ids.tolist()
    assert derive_layout(data) == lay
