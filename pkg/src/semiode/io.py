"""Observation CSVs, parameter files and run configuration.

Observation CSV
    Header ``subject_id,curve_id,time,value`` with an optional ``a_known``
    column (blank when unknown).  Optional leading comment lines of the form
    ``# time_window: T0,T1`` and ``# units: time=h,value=mm`` carry
    metadata.  Times are in original units and mapped to [0, 1] through the
    time window, which defaults to the observed time range.

Config file
    YAML (JSON is also accepted, being a subset).  See ``RunConfig`` for the
    recognised sections.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .basis import SplineBasis
from .errors import ConfigError, DataError
from .model import Dataset, FitConfig, Parameters
from .selection import ModelSpec, knot_grid
from .sim import SimConfig

OBS_COLUMNS = ("subject_id", "curve_id", "time", "value")


def _parse_meta(line: str, meta: dict):
    body = line.lstrip("#").strip()
    if ":" not in body:
        return
    key, val = (s.strip() for s in body.split(":", 1))
    if key == "time_window":
        parts = [p for p in val.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise DataError(f"bad time_window metadata: {val!r}")
        meta["time_window"] = (float(parts[0]), float(parts[1]))
    elif key == "units":
        meta["units"] = dict(p.split("=", 1) for p in val.replace(" ", "").split(",") if "=" in p)


def ingest(path, time_window=None) -> Dataset:
    """Read an observation CSV into a Dataset with times rescaled to [0, 1]."""
    meta: dict = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            _parse_meta(ln, meta)
        elif ln.strip():
            body.append(ln)
    if not body:
        raise DataError("no observations")
    reader = csv.DictReader(body)
    cols = reader.fieldnames or []
    missing = [c for c in OBS_COLUMNS if c not in cols]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    has_a = "a_known" in cols
    subj, curve, t, y, ak = [], [], [], [], []
    seen = {}
    for row_no, row in enumerate(reader, start=2):
        try:
            ti = float(row["time"])
            yi = float(row["value"])
            ai = float(row["a_known"]) if has_a and (row["a_known"] or "").strip() else math.nan
        except (TypeError, ValueError) as exc:
            raise DataError(f"row {row_no}: non-numeric field ({exc})") from exc
        if not (math.isfinite(ti) and math.isfinite(yi)):
            raise DataError(f"row {row_no}: non-finite time or value")
        key = (row["subject_id"], row["curve_id"], ti)
        if key in seen:
            raise DataError(f"row {row_no}: duplicate (subject, curve, time), first seen "
                            f"on row {seen[key]}")
        seen[key] = row_no
        subj.append(row["subject_id"])
        curve.append(row["curve_id"])
        t.append(ti)
        y.append(yi)
        ak.append(ai)
    if not t:
        raise DataError("no observations")
    t = np.asarray(t)
    window = time_window or meta.get("time_window") or (float(t.min()), float(t.max()))
    T0, T1 = (float(v) for v in window)
    if not T1 > T0:
        raise DataError(f"time window [{T0}, {T1}] is empty")
    if t.min() < T0 or t.max() > T1:
        raise DataError("observation times fall outside the time window")
    tau = (t - T0) / (T1 - T0)
    return Dataset.from_records(subj, curve, tau, y, np.asarray(ak) if has_a else None,
                                time_window=(T0, T1), units=meta.get("units"))


def emit(data: Dataset, path):
    """Write a Dataset as an observation CSV (times in original units)."""
    T0, T1 = data.time_window
    with open(path, "w", newline="") as fh:
        fh.write(f"# time_window: {T0!r},{T1!r}\n")
        if data.units:
            fh.write("# units: " + ",".join(f"{k}={v}" for k, v in data.units.items()) + "\n")
        w = csv.writer(fh)
        cols = list(OBS_COLUMNS) + (["a_known"] if data.a_known is not None else [])
        w.writerow(cols)
        for k in range(data.m_dotdot):
            c = data.obs_curve[k]
            t = T0 + data.times[k] * (T1 - T0) if (T0, T1) != (0.0, 1.0) else data.times[k]
            row = [data.subject_ids[data.curve_subject[c]], data.curve_ids[c],
                   repr(float(t)), repr(float(data.values[k]))]
            if data.a_known is not None:
                a = data.a_known[c]
                row.append("" if np.isnan(a) else repr(float(a)))
            w.writerow(row)


# parameter files -------------------------------------------------------------

def save_params(path, params: Parameters, basis: SplineBasis, data: Dataset | None = None,
                extra: dict | None = None):
    out = {
        "basis": basis.to_dict(),
        "beta": params.beta.tolist(),
        "theta": params.theta.tolist(),
        "a": params.a.tolist(),
    }
    if data is not None:
        out["subject_ids"] = list(data.subject_ids)
        out["curve_ids"] = list(data.curve_ids)
        out["time_window"] = list(data.time_window)
    out.update(extra or {})
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)


def load_params(path):
    """(Parameters, SplineBasis, raw dict) from a parameter file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
        basis = SplineBasis.from_dict(raw["basis"])
        params = Parameters(raw.get("a", []), raw.get("theta", []), raw["beta"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot read parameter file {path}: {exc}") from exc
    return params, basis, raw


# run configuration -----------------------------------------------------------

TOP_KEYS = {"data", "out", "seed", "basis", "fit", "simulate", "grid", "study", "init",
            "plot", "time_window", "log_level"}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    return raw


def _grid_from(spec) -> list:
    if spec is None:
        return knot_grid(range(2, 7))
    if isinstance(spec, dict):
        extra = set(spec) - {"Ms", "offset", "span", "degree", "layout", "domain", "A",
                             "lambda_R"}
        if extra:
            raise ConfigError(f"unknown grid options: {sorted(extra)}")
        grid = knot_grid(spec.get("Ms", range(2, 7)), spec.get("offset", 0.1),
                         spec.get("span", 1.0), spec.get("degree", 3),
                         spec.get("layout", "centered"), spec.get("domain"))
        for m in grid:
            m.A = spec.get("A")
            m.lambda_R = float(spec.get("lambda_R", 0.0))
        return grid
    if isinstance(spec, list):
        return [ModelSpec.from_dict(m) for m in spec]
    raise ConfigError("grid must be a mapping (knot-grid shorthand) or a list of models")


@dataclass
class RunConfig:
    """Fully resolved run configuration.

    Sections: ``data`` (observation CSV), ``out`` (output directory),
    ``seed``, ``basis`` (SplineBasis fields), ``fit`` (FitConfig fields),
    ``simulate`` (SimConfig fields or ``preset``), ``grid`` (knot-grid
    shorthand or explicit model list), ``study`` (replicates, reference,
    select), ``init`` (parameter file to start from), ``plot`` (what,
    params, points), ``time_window`` and ``log_level``.
    """

    data: str | None = None
    out: str = "out"
    seed: int | None = None
    basis: SplineBasis | None = None
    fit: FitConfig = field(default_factory=FitConfig)
    simulate: SimConfig = field(default_factory=SimConfig)
    grid: list = field(default_factory=lambda: knot_grid(range(2, 7)))
    grid_spec: object = None
    study: dict = field(default_factory=lambda: {"replicates": 10, "reference": "M4",
                                                 "select": True})
    init: str | None = None
    plot: dict = field(default_factory=lambda: {"what": "regr", "params": None, "points": 512})
    time_window: tuple | None = None
    log_level: str = "WARNING"

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> "RunConfig":
        extra = set(raw) - TOP_KEYS
        if extra:
            raise ConfigError(f"unknown config section(s): {sorted(extra)}")

        def path(p):
            return None if p is None else os.path.abspath(os.path.join(base_dir, p))

        try:
            basis = SplineBasis.from_dict(raw["basis"]) if raw.get("basis") else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad basis section: {exc}") from exc
        fitcfg = FitConfig.from_dict(raw.get("fit") or {})
        simcfg = SimConfig.from_dict(raw.get("simulate") or {})
        study = {"replicates": 10, "reference": "M4", "select": True}
        st = raw.get("study") or {}
        if set(st) - set(study):
            raise ConfigError(f"unknown study options: {sorted(set(st) - set(study))}")
        study.update(st)
        plot = {"what": "regr", "params": None, "points": 512}
        pl = raw.get("plot") or {}
        if set(pl) - set(plot):
            raise ConfigError(f"unknown plot options: {sorted(set(pl) - set(plot))}")
        plot.update(pl)
        if plot["params"]:
            plot["params"] = path(plot["params"])
        try:
            grid = _grid_from(raw.get("grid"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid section: {exc}") from exc
        tw = raw.get("time_window")
        if tw is not None and (len(tw) != 2 or not float(tw[1]) > float(tw[0])):
            raise ConfigError("time_window must be [T0, T1] with T1 > T0")
        seed = raw.get("seed")
        if seed is not None and (not isinstance(seed, int) or seed < 0):
            raise ConfigError("seed must be a nonnegative integer")
        return cls(data=path(raw.get("data")), out=raw.get("out", "out"), seed=seed,
                   basis=basis, fit=fitcfg, simulate=simcfg, grid=grid,
                   grid_spec=raw.get("grid"), study=study, init=path(raw.get("init")),
                   plot=plot, time_window=tuple(tw) if tw else None,
                   log_level=str(raw.get("log_level", "WARNING")).upper())

    def resolved(self) -> dict:
        """Plain-data form with every default filled in (the config echo)."""
        sim = self.simulate.to_dict()
        if self.seed is not None:
            sim["seed"] = self.seed
        return {
            "data": self.data,
            "out": self.out,
            "seed": self.seed,
            "basis": self.basis.to_dict() if self.basis else None,
            "fit": self.fit.to_dict(),
            "simulate": sim,
            "grid": [m.to_dict() for m in self.grid],
            "study": dict(self.study),
            "init": self.init,
            "plot": dict(self.plot),
            "time_window": list(self.time_window) if self.time_window else None,
            "log_level": self.log_level,
        }


def write_config_echo(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(cfg.resolved()), fh, sort_keys=False)
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
