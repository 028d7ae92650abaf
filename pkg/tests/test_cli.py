import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rrme import io
from rrme.cli import exit_code_for, main
from rrme.errors import ConfigError, DataError, NumericalError, SelectionFailedError


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = d / "d.csv"
    assert main(["simulate", "--scenario", "2", "--gamma", "2", "--sigma2", "0.04", "--n", "100", "--seed", "7", "--out", str(data)]) == 0
    return d, data


def _json_err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_end_to_end(sim, capsys):
    d, data = sim
    assert (d / "d.truth.json").exists()
    params = d / "p.json"
    rc = main(["fit", "--data", str(data), "--family", "t", "--max-iter", "3000", "--out", str(params), "--scores", str(d / "s.csv")])
    assert rc == 0
    out = d / "e.json"
    assert main(["evaluate", "--params", str(params), "--data", str(data), "--truth", str(d / "d.truth.json"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    for col in ("mu", "nu", "f1", "f2", "g1", "g2", "Y", "Z"):
        assert rep["iae_x1000"][col] == pytest.approx(1000 * rep["iae"][col])
    assert rep["columns"] == ["mu", "nu", "f1", "f2", "g1", "g2", "Y", "Z"]
    rows = list(csv.reader((d / "s.csv").open()))
    assert rows[0] == ["subject_id", "alpha1", "alpha2", "beta1", "beta2", "u_hat"] and len(rows) == 101


def test_fit_is_byte_identical(sim):
    d, data = sim
    args = ["fit", "--data", str(data), "--family", "slash", "--max-iter", "40", "--k-alpha", "1"]
    main(args + ["--out", str(d / "a.json")])
    main(args + ["--out", str(d / "b.json")])
    assert (d / "a.json").read_bytes() == (d / "b.json").read_bytes()


def test_non_convergence_exit_code(sim, capsys):
    d, data = sim
    rc = main(["fit", "--data", str(data), "--family", "t", "--max-iter", "3", "--out", str(d / "nc.json")])
    assert rc == 5
    assert (d / "nc.json").exists()
    assert _json_err(capsys)["error"] == "non-convergence"


def test_predict_outputs(sim):
    d, data = sim
    params = d / "q.json"
    main(["fit", "--data", str(data), "--family", "normal", "--max-iter", "50", "--domain", "0", "1", "--out", str(params)])
    curves, eff = d / "c.csv", d / "eff.csv"
    assert main(["predict", "--params", str(params), "--data", str(data), "--grid-size", "11", "--out", str(curves), "--effects", str(eff)]) == 0
    rows = list(csv.DictReader(curves.open()))
    assert len(rows) == 100 * 2 * 11
    p, basis, _ = io.load_parameters(params)
    erows = [r for r in csv.DictReader(eff.open()) if r["channel"] == "Y" and r["component"] == "1"]
    t = np.array([float(r["time"]) for r in erows])
    plus = np.array([float(r["plus"]) for r in erows])
    mean = np.array([float(r["mean"]) for r in erows])
    from rrme.splinebasis import design_matrix

    B = design_matrix(basis, t)
    assert np.allclose(plus - mean, 2 * np.sqrt(p.D_alpha[0]) * (B @ p.Theta_f[:, 0]))
    assert main(["predict", "--params", str(params), "--times", "0,0.5,1", "--out", str(d / "x.csv"), "--effects", str(d / "e2.csv")]) == 0


def test_cv_and_select(sim):
    d, data = sim
    out = d / "cv.json"
    assert main(["cv", "--data", str(data), "--family", "t", "--folds", "3", "--max-iter", "30", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["mae_combined"] > 0 and len(rep["per_fold"]) == 3
    sel = d / "sel.json"
    assert main(["select", "--data", str(data), "--family", "t", "--grid", "2x2", "--folds", "3", "--max-iter", "30", "--out", str(sel)]) == 0
    rep = json.loads(sel.read_text())
    assert len(rep["cells"]) == 4 and rep["r"] == 0.05


def test_config_file_and_errors(sim, tmp_path, capsys):
    _, data = sim
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  family: bogus\n")
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o.json")]) == 2
    assert _json_err(capsys)["error"] == "config"
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,channel,time,value\na,Y,0.1,1\na,Q,0.2,1\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "o.json")]) == 3
    err = _json_err(capsys)
    assert err["error"] == "data" and "bad.csv:3" in err["message"]
    assert main(["fit", "--data", str(data), "--set", "penalty.lambda_mu", "--out", str(tmp_path / "o.json")]) == 2
    assert main(["fit", "--data", str(data), "--set", "penalty.lambda_mu=1e-4", "--max-iter", "2", "--out", str(tmp_path / "o.json")]) == 5


def test_exit_code_mapping():
    assert exit_code_for(ConfigError("x")) == 2
    assert exit_code_for(DataError("x")) == 3
    assert exit_code_for(NumericalError("x")) == 4
    assert exit_code_for(SelectionFailedError("x")) == 4


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.csv"
    r = subprocess.run([sys.executable, "-m", "rrme", "simulate", "--scenario", "1", "--n", "3", "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert io.read_dataset(out, (0, 1)).n == 3
    r = subprocess.run([sys.executable, "-m", "rrme", "simulate", "--scenario", "9", "--n", "3", "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr)["error"]
