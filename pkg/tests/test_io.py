import json

import numpy as np
import pytest

from semiode import io as sio
from semiode.basis import centered_basis
from semiode.errors import ConfigError, DataError
from semiode.model import FitConfig, Parameters
from semiode.sim import TRUTH_KNOTS, SimConfig, generate


def _write(path, text):
    path.write_text(text)
    return path


def test_round_trip_generated(tmp_path):
    for cfg in (SimConfig(seed=1, n=3, N=4), SimConfig(seed=2, n=2, N=3, a_known=True),
                SimConfig.preset("plant", seed=3)):
        d = generate(cfg)
        sio.emit(d, tmp_path / "obs.csv")
        back = sio.ingest(tmp_path / "obs.csv")
        assert back.equals(d, atol=0)
        assert back.time_window == d.time_window and back.units == d.units


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="no observations"):
        sio.ingest(_write(tmp_path / "e.csv", ""))
    with pytest.raises(DataError, match="no observations"):
        sio.ingest(_write(tmp_path / "h.csv", "subject_id,curve_id,time,value\n"))


def test_single_curve_three_rows(tmp_path):
    p = _write(tmp_path / "one.csv", "subject_id,curve_id,time,value\n"
               "s,c,0.0,1.0\ns,c,5.0,1.5\ns,c,10.0,2.5\n")
    d = sio.ingest(p)
    assert (d.n, d.N_dot, d.m_dotdot) == (1, 1, 3)
    np.testing.assert_allclose(d.times, [0.0, 0.5, 1.0])
    assert d.time_window == (0.0, 10.0)


def test_metadata_window_and_units(tmp_path):
    p = _write(tmp_path / "m.csv", "# time_window: 0,12\n# units: time=h,value=mm\n"
               "subject_id,curve_id,time,value\ns,c,3,1.0\ns,c,6,2.0\n")
    d = sio.ingest(p)
    np.testing.assert_allclose(d.times, [0.25, 0.5])
    assert d.units == {"time": "h", "value": "mm"}
    with pytest.raises(DataError):
        sio.ingest(p, time_window=(4.0, 12.0))


def test_row_errors_carry_row_numbers(tmp_path):
    head = "subject_id,curve_id,time,value\n"
    with pytest.raises(DataError, match="row 3"):
        sio.ingest(_write(tmp_path / "a.csv", head + "s,c,0.1,1\ns,c,x,2\n"))
    with pytest.raises(DataError, match="row 4.*row 2"):
        sio.ingest(_write(tmp_path / "b.csv", head + "s,c,0.1,1\ns,c,0.2,2\ns,c,0.1,3\n"))
    with pytest.raises(DataError, match="missing column"):
        sio.ingest(_write(tmp_path / "c.csv", "subject_id,time,value\ns,0.1,1\n"))


def test_a_known_column(tmp_path):
    p = _write(tmp_path / "a.csv", "subject_id,curve_id,time,value,a_known\n"
               "s,c,0,0.2,0.2\ns,c,1,0.4,0.2\ns,d,0,0.3,\ns,d,1,0.5,\n")
    d = sio.ingest(p)
    assert d.a_fixed.tolist() == [True, False]


def test_params_round_trip(tmp_path):
    b = centered_basis(TRUTH_KNOTS)
    p = Parameters([0.2, 0.3], [0.1, -0.1], [0.1, 1.2, 1.6, 0.4])
    sio.save_params(tmp_path / "p.json", p, b, extra={"model_id": "M4"})
    q, b2, raw = sio.load_params(tmp_path / "p.json")
    assert b2 == b and raw["model_id"] == "M4"
    for name in ("a", "theta", "beta"):
        np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        sio.load_params(tmp_path / "bad.json")


def test_run_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        sio.RunConfig.from_dict({"bogus": 1}, str(tmp_path))
    with pytest.raises(ConfigError):
        sio.RunConfig.from_dict({"fit": {"lamda2": 0.1}}, str(tmp_path))
    cfg = sio.RunConfig.from_dict({"data": "obs.csv", "fit": {"lambda2": 0.02}}, str(tmp_path))
    assert cfg.data == str(tmp_path / "obs.csv")
    assert cfg.fit == FitConfig(lambda2=0.02)
    assert [m.model_id for m in cfg.grid] == ["M2", "M3", "M4", "M5", "M6"]


def test_grid_shorthand_and_list(tmp_path):
    cfg = sio.RunConfig.from_dict({"grid": {"Ms": [3, 4], "A": 0.5, "lambda_R": 2.0}},
                                  str(tmp_path))
    assert [(m.model_id, m.A, m.lambda_R) for m in cfg.grid] == [("M3", 0.5, 2.0),
                                                                 ("M4", 0.5, 2.0)]
    spec = [m.to_dict() for m in cfg.grid]
    cfg2 = sio.RunConfig.from_dict({"grid": spec}, str(tmp_path))
    assert [m.to_dict() for m in cfg2.grid] == spec


def test_config_echo_is_loadable(tmp_path):
    cfg = sio.RunConfig.from_dict({"seed": 4, "simulate": {"preset": "sparse", "n": 3},
                                   "out": "o"}, str(tmp_path))
    sio.write_config_echo(cfg, tmp_path)
    raw = sio.load_config(tmp_path / "config.resolved.yaml")
    again = sio.RunConfig.from_dict(raw, str(tmp_path))
    assert again.resolved() == cfg.resolved()


def test_json_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "fit": {"lambda1": 0.0}}))
    assert sio.load_config(tmp_path / "c.json")["fit"]["lambda1"] == 0.0
