import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from itegmm.cli import main
from itegmm.panel import Schema, load_panel, write_panel
from itegmm.panel import PanelDataset


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--n1", "60", "--n0", "60", "--seed", "3", "--out", str(out)]) == 0
    return out


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_simulate_outputs_round_trip(simulated):
    schema = Schema.from_mapping(json.loads((simulated / "schema.json").read_text()))
    data = load_panel(simulated / "panel.csv", schema)
    assert data.n_individuals == 120 and data.n_outcomes == 5
    truth = pd.read_csv(simulated / "truth.csv")
    assert len(truth) == 120 and truth["treated"].sum() == 60
    manifest = json.loads((simulated / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "simulate"


def test_simulate_requires_seed(tmp_path, capsys):
    code, _, err = _run(["simulate", "--out", tmp_path], capsys)
    assert code == 2 and "seed" in json.loads(err)["message"]


def test_estimate_with_bootstrap(simulated, tmp_path, capsys):
    argv = ["estimate", "--data", simulated / "panel.csv", "--schema", simulated / "schema.json",
            "--target", "2:1", "--p", "2", "--b", "500", "--alpha", "0.10", "--seed", "7",
            "--out", tmp_path]
    code, out, _ = _run(argv, capsys)
    assert code == 0
    eff = pd.read_csv(tmp_path / "effects.csv")
    assert len(eff) == 120
    assert list(eff.columns) == ["id", "tau_hat", "se", "ci_lo", "ci_hi", "significance"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["config_hash"]) == 64
    assert manifest["inputs"]["data"]["sha256"]
    assert json.loads((tmp_path / "selection.json").read_text())["best_p"] == 2
    assert json.loads(out)["split"]["target"] == [2, 1]
    # replay from the manifest config gives identical output
    cfg = manifest["config"]
    again = tmp_path / "again"
    argv2 = ["estimate", "--data", cfg["data"], "--schema", cfg["schema"], "--target", cfg["target"],
             "--p", cfg["p"], "--b", cfg["b"], "--alpha", cfg["alpha"], "--seed", cfg["seed"],
             "--threads", "4", "--out", again]
    assert _run(argv2, capsys)[0] == 0
    assert (again / "effects.csv").read_bytes() == (tmp_path / "effects.csv").read_bytes()


def test_estimate_without_bootstrap(simulated, tmp_path, capsys):
    code, _, _ = _run(["estimate", "--data", simulated / "panel.csv", "--schema",
                       simulated / "schema.json", "--target", "2:3", "--cells", "1:1,1:2",
                       "--b", "0", "--out", tmp_path], capsys)
    assert code == 0
    eff = pd.read_csv(tmp_path / "effects.csv")
    assert list(eff.columns) == ["id", "tau_hat"]
    est = json.loads((tmp_path / "estimate.json").read_text())
    assert est["split"]["regressor_cells"] == [[1, 1], [1, 2]]


def test_missing_schema_role(simulated, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"id": "id", "period": "period", "outcomes": ["y1"]}))
    code, _, err = _run(["estimate", "--data", simulated / "panel.csv", "--schema", bad,
                         "--target", "2:1", "--out", tmp_path], capsys)
    payload = json.loads(err)
    assert code == 2 and payload["exit_code"] == 2
    assert "treatment" in payload["message"]


def test_missing_file(tmp_path, capsys):
    code, _, err = _run(["select", "--data", tmp_path / "nope.csv", "--schema", tmp_path / "s.json",
                         "--target", "2:1", "--out", tmp_path], capsys)
    assert code == 2 and json.loads(err)["error"] == "FileNotFoundError"


def test_estimation_failure_exit_one(tmp_path, capsys):
    g = np.random.default_rng(0)
    y = g.normal(size=(20, 2, 3))
    y[10:] = 1.0  # controls carry no variation: singular control design
    d = np.zeros((20, 2), int)
    d[:10, 1] = 1
    write_panel(PanelDataset(y, None, d), tmp_path / "p.csv")
    (tmp_path / "s.json").write_text(json.dumps(
        {"id": "id", "period": "period", "treatment": "treatment", "outcomes": ["y1", "y2", "y3"]}))
    code, _, err = _run(["estimate", "--data", tmp_path / "p.csv", "--schema", tmp_path / "s.json",
                         "--target", "2:1", "--cells", "1:1", "--out", tmp_path], capsys)
    assert code == 1 and json.loads(err)["error"] == "GmmError"


def test_select_and_holdout(simulated, tmp_path, capsys):
    base = ["--data", simulated / "panel.csv", "--schema", simulated / "schema.json",
            "--target", "2:2", "--seed", "1"]
    code, out, _ = _run(["select", *base, "--out", tmp_path / "sel"], capsys)
    assert code == 0 and json.loads(out)["best_p"] >= 1
    code, _, _ = _run(["estimate", *base, "--selection-holdout", "--out", tmp_path / "ho"], capsys)
    assert code == 0
    assert len(pd.read_csv(tmp_path / "ho" / "effects.csv")) == 60


def test_env_override(simulated, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ITEGMM_SEED", "9")
    monkeypatch.setenv("ITEGMM_B", "100")
    code, _, _ = _run(["estimate", "--data", simulated / "panel.csv", "--schema",
                       simulated / "schema.json", "--target", "2:1", "--cells", "1:1,1:2",
                       "--out", tmp_path], capsys)
    assert code == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["seed"] == 9 and m["config"]["b"] == 100
    code, _, _ = _run(["estimate", "--data", simulated / "panel.csv", "--schema",
                       simulated / "schema.json", "--target", "2:1", "--cells", "1:1,1:2",
                       "--b=0", "--out", tmp_path / "flag"], capsys)
    assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["config"]["b"] == 0


def test_report_oracle(tmp_path, capsys):
    """Synthetic groups with a known characteristic gap."""
    g = np.random.default_rng(2)
    n = 200
    ids = [f"i{j}" for j in range(3 * n)]
    tau = np.concatenate([np.full(n, 0.0), np.full(n, -5.0), np.full(n, 5.0)])
    pd.DataFrame({"id": ids, "tau_hat": tau, "se": np.ones(3 * n)}).to_csv(tmp_path / "e.csv", index=False)
    x = np.concatenate([0.1 * g.normal(size=n), 0.1 * g.normal(size=n), 1 + 0.1 * g.normal(size=n)])
    pd.DataFrame({"pid": ids, "x": x}).to_csv(tmp_path / "c.csv", index=False)
    code, out, _ = _run(["report", "--effects", tmp_path / "e.csv", "--characteristics",
                         tmp_path / "c.csv", "--id-column", "pid", "--out", tmp_path], capsys)
    assert code == 0
    table = pd.read_csv(tmp_path / "report.csv", dtype=str, keep_default_na=False).set_index("characteristic")
    assert table.loc["x", "(5) = (4)-(1)"].endswith("***")
    assert table.loc["x", "(5) = (4)-(1)"].startswith(("0.99", "1.00", "1.01"))
    assert table.loc["N"].tolist() == ["200", "200", "", "200", ""]
    assert "(3) = (2)-(1)" in out


def test_report_id_mismatch(tmp_path, capsys):
    pd.DataFrame({"id": ["a", "b"], "ci_lo": [0.1, -1], "ci_hi": [1, 1]}).to_csv(tmp_path / "e.csv", index=False)
    pd.DataFrame({"id": ["a", "z"], "x": [1, 2]}).to_csv(tmp_path / "c.csv", index=False)
    code, _, err = _run(["report", "--effects", tmp_path / "e.csv", "--characteristics",
                         tmp_path / "c.csv", "--out", tmp_path], capsys)
    assert code == 2 and "'b'" in json.loads(err)["message"] and "'z'" in json.loads(err)["message"]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "itegmm.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "reproduce" in res.stdout
    res = subprocess.run([sys.executable, "-m", "itegmm.cli", "estimate"], capture_output=True, text=True)
    assert res.returncode == 2


@pytest.mark.slow
def test_reproduce_command(tmp_path, capsys):
    code, out, _ = _run(["reproduce", "--table", "4", "--scale", "0.1", "--outer-draws", "1",
                         "--seed", "0", "--out", tmp_path], capsys)
    assert code == 0 and (tmp_path / "table4.csv").exists()
    assert out.startswith("Table 4")
