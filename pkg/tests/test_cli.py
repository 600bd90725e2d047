import csv
import json
import subprocess
import sys
from xml.etree import ElementTree

import pytest
import yaml

from semiode.cli import main

SIM = {
    "seed": 3,
    "simulate": {"preset": "moderate", "a_known": True, "noise_sd": 0.0, "n": 4, "N": 5},
    "basis": {"knots": [0.35, 0.6, 0.85, 1.1], "degree": 3, "layout": "centered"},
    "fit": {"lambda1": 0.0, "lambda2": 0.0, "adaptive_nr": False},
}


def _config(tmp_path, extra=None, name="run.yaml"):
    cfg = {**SIM, **(extra or {})}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def simulated(tmp_path):
    conf = _config(tmp_path)
    assert main(["simulate", "--config", conf, "--out", str(tmp_path / "sim")]) == 0
    return tmp_path / "sim", conf


def test_simulate_outputs(simulated):
    out, _ = simulated
    assert (out / "observations.csv").exists()
    truth = json.loads((out / "truth.json").read_text())
    assert abs(sum(truth["theta"])) < 1e-12
    assert (out / "config.resolved.yaml").exists()


def test_fit_from_truth_two_cycles(simulated, tmp_path):
    out, conf = simulated
    fit_out = tmp_path / "fit"
    rc = main(["fit", "--config", conf, "--data", str(out / "observations.csv"),
               "--init", str(out / "truth.json"), "--out", str(fit_out)])
    assert rc == 0
    with open(fit_out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) <= 2 and float(rows[-1]["loss"]) < 1e-8
    diag = json.loads((fit_out / "diagnostics.json").read_text())
    assert diag["converged"] == {"lm": True, "nr": True}
    assert (fit_out / "residuals.csv").exists() and (fit_out / "residuals.svg").exists()


def test_plot_regr_grid(simulated, tmp_path):
    out, conf = simulated
    rc = main(["plot", "--config", conf, "--what", "regr", "--params", str(out / "truth.json"),
               "--out", str(tmp_path / "plot")])
    assert rc == 0
    lines = (tmp_path / "plot" / "regr.csv").read_text().splitlines()
    assert lines[0] == "x,g,g_prime" and len(lines) == 513
    root = ElementTree.parse(tmp_path / "plot" / "regr.svg").getroot()
    assert root.tag == "{http://www.w3.org/2000/svg}svg" and root.get("version") == "1.1"
    # the REGR chart draws g' only; g has its own plot
    assert len(list(root.iter("{http://www.w3.org/2000/svg}polyline"))) == 1


@pytest.mark.parametrize("what", ["g", "trajectories", "residuals"])
def test_plot_other_kinds(simulated, tmp_path, what):
    out, conf = simulated
    rc = main(["plot", "--config", conf, "--what", what, "--params", str(out / "truth.json"),
               "--data", str(out / "observations.csv"), "--out", str(tmp_path / what)])
    assert rc == 0
    assert (tmp_path / what / f"{what}.csv").exists()
    assert (tmp_path / what / f"{what}.svg").exists()


def test_select_writes_one_selected_row(tmp_path):
    conf = _config(tmp_path, {"simulate": {"preset": "moderate", "a_known": True, "n": 5,
                                           "N": 6}, "fit": {}, "grid": {"Ms": [3, 4]}})
    assert main(["simulate", "--config", conf, "--out", str(tmp_path / "sim")]) == 0
    rc = main(["select", "--config", conf, "--data", str(tmp_path / "sim" / "observations.csv"),
               "--out", str(tmp_path / "sel")])
    assert rc == 0
    with open(tmp_path / "sel" / "cv_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["model_id"] for r in rows] == ["M3", "M4"]
    assert sum(r["selected"] == "True" for r in rows) == 1
    params = json.loads((tmp_path / "sel" / "params.json").read_text())
    assert params["model_id"] in ("M3", "M4")


def test_config_echo_reproduces(simulated, tmp_path):
    out, _ = simulated
    echo = out / "config.resolved.yaml"
    assert main(["simulate", "--config", str(echo), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "observations.csv").read_bytes() == \
        (out / "observations.csv").read_bytes()
    assert (tmp_path / "again" / "truth.json").read_bytes() == (out / "truth.json").read_bytes()


def test_seed_override_changes_data(simulated, tmp_path):
    out, conf = simulated
    assert main(["simulate", "--config", conf, "--seed", "99", "--out", str(tmp_path / "s99")]) == 0
    assert (tmp_path / "s99" / "observations.csv").read_bytes() != \
        (out / "observations.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    conf = _config(tmp_path)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["fit", "--config", conf, "--data", str(empty), "--out", str(tmp_path / "e")]) == 2
    assert _error(capsys) == {"error": "DataError", "exit_code": 2, "message": "no observations"}

    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "e")]) == 1
    assert _error(capsys)["exit_code"] == 1

    assert main(["frobnicate"]) == 1
    assert _error(capsys)["error"] == "ConfigError"

    nobasis = _config(tmp_path, {"basis": None}, "nobasis.yaml")
    dup = tmp_path / "dup.csv"
    dup.write_text("subject_id,curve_id,time,value\ns,c,0.1,1\ns,c,0.1,2\n")
    assert main(["fit", "--config", nobasis, "--data", str(dup), "--out", str(tmp_path / "e")]) == 1
    capsys.readouterr()
    assert main(["fit", "--config", conf, "--data", str(dup), "--out", str(tmp_path / "e")]) == 2
    assert "row 3" in _error(capsys)["message"]


def test_fit_failure_exit_code(simulated, tmp_path, capsys):
    out, _ = simulated
    conf = _config(tmp_path, {"fit": {"max_lm_iters": 1, "lm_tol": 1e-14}}, "short.yaml")
    rc = main(["fit", "--config", conf, "--data", str(out / "observations.csv"),
               "--out", str(tmp_path / "f")])
    assert rc == 3
    assert _error(capsys)["exit_code"] == 3
    assert (tmp_path / "f" / "trace.csv").exists()


def test_console_entry_point(tmp_path):
    conf = _config(tmp_path)
    res = subprocess.run([sys.executable, "-m", "semiode.cli", "simulate", "--config", conf,
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.strip().endswith("observations.csv")
