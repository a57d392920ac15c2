import numpy as np
import pandas as pd
import pytest
from scipy import stats

from itegmm.report import ReportError, group_report, labels_from_effects, stars


def _chars(ids, **cols):
    return pd.DataFrame({"id": ids, **cols})


def test_stars():
    assert [stars(p) for p in (0.001, 0.02, 0.07, 0.5, np.nan)] == ["***", "**", "*", "", ""]


def test_labels_from_intervals_and_se():
    eff = pd.DataFrame({"id": ["a", "b", "c"], "ci_lo": [-2, -1, 0.2], "ci_hi": [-1, 1, 3.0]})
    assert labels_from_effects(eff).tolist() == ["negative", "none", "positive"]
    eff = pd.DataFrame({"id": [1, 2], "tau_hat": [3.0, 0.1], "se": [1.0, 1.0]})
    lab = labels_from_effects(eff, alpha=0.10)
    assert lab.tolist() == ["positive", "none"] and lab.index.tolist() == ["1", "2"]
    with pytest.raises(ReportError):
        labels_from_effects(pd.DataFrame({"id": [1], "tau_hat": [1.0]}))


def test_single_group_table():
    ids = [str(i) for i in range(10)]
    labels = pd.Series(["none"] * 10, index=ids)
    rep = group_report(labels, _chars(ids, age=np.arange(10.0)))
    assert rep.counts == {"none": 10, "negative": 0, "positive": 0}
    f = rep.formatted()
    assert f.loc["age", "(1) none"] == "4.50"
    assert f.loc["age", "(3) = (2)-(1)"] == "" and f.loc["age", "(5) = (4)-(1)"] == ""


def test_strong_difference_gets_three_stars():
    g = np.random.default_rng(0)
    ids = [str(i) for i in range(400)]
    labels = pd.Series(["positive"] * 200 + ["none"] * 200, index=ids)
    x = np.concatenate([1 + 0.1 * g.normal(size=200), 0.1 * g.normal(size=200)])
    rep = group_report(labels, _chars(ids, x=x))
    assert rep.table.loc["x", "pos_diff"] == pytest.approx(1.0, abs=0.03)
    assert rep.formatted().loc["x", "(5) = (4)-(1)"] in ("0.99***", "1.00***", "1.01***")


def test_five_column_layout_and_welch():
    g = np.random.default_rng(1)
    labs = np.array(["none"] * 50 + ["negative"] * 30 + ["positive"] * 20)
    ids = [f"p{i}" for i in range(100)]
    x = g.normal(size=100) * np.where(labs == "positive", 3.0, 1.0) + (labs == "negative") * 0.5
    rep = group_report(pd.Series(labs, index=ids), _chars(ids, x=x, name=["z"] * 100))
    f = rep.formatted()
    assert list(f.columns) == ["(1) none", "(2) negative", "(3) = (2)-(1)", "(4) positive", "(5) = (4)-(1)"]
    assert list(f.index) == ["x", "N"]
    assert f.loc["N"].tolist() == ["50", "30", "", "20", ""]
    none, pos = x[labs == "none"], x[labs == "positive"]
    # Welch-Satterthwaite by hand
    v1, v0 = pos.var(ddof=1) / pos.size, none.var(ddof=1) / none.size
    t = (pos.mean() - none.mean()) / np.sqrt(v1 + v0)
    df = (v1 + v0) ** 2 / (v1**2 / (pos.size - 1) + v0**2 / (none.size - 1))
    assert rep.table.loc["x", "pos_p"] == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-10)
    md = rep.to_markdown()
    assert "| x |" in md and "Welch" in md


def test_id_mismatch_lists_orphans():
    labels = pd.Series(["none", "none"], index=["a", "b"])
    with pytest.raises(ReportError, match=r"\['b'\].*\['c'\]"):
        group_report(labels, _chars(["a", "c"], x=[1.0, 2.0]))


def test_csv(tmp_path):
    ids = ["a", "b", "c", "d"]
    labels = pd.Series(["none", "none", "positive", "positive"], index=ids)
    rep = group_report(labels, _chars(ids, x=[0.0, 0.1, 1.0, 1.2]))
    df = pd.read_csv(rep.to_csv(tmp_path / "r.csv"), dtype=str, keep_default_na=False)
    assert df.columns[0] == "characteristic" and df.shape == (2, 6)
