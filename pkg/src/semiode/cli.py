"""Command-line entry point: ``semiode {simulate,fit,select,study,plot}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric or fit failure.  Failures also print one JSON object on stderr,
e.g. ``{"error": "DataError", "exit_code": 2, "message": "no observations"}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import io as sio
from . import plotting
from .errors import ConfigError, DataError, FitError, NumericError, SemiodeError
from .fitting import fit
from .model import residuals, variance_estimates
from .selection import SelectionError, model_search
from .sim import run_study, simulate

log = logging.getLogger("semiode")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _common(p):
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")


def build_parser():
    parser = _Parser(prog="semiode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", help="draw a synthetic data set")
    _common(p)
    p = sub.add_parser("fit", help="fit one model to an observation CSV")
    _common(p)
    p.add_argument("--data", help="observation CSV (overrides the config)")
    p.add_argument("--init", help="parameter file to start from")
    p = sub.add_parser("select", help="fit every grid model and pick one by approximate CV")
    _common(p)
    p.add_argument("--data", help="observation CSV (overrides the config)")
    p = sub.add_parser("study", help="run the replicated simulation study")
    _common(p)
    p.add_argument("--replicates", type=int)
    p = sub.add_parser("plot", help="write plot-point CSV and SVG")
    _common(p)
    p.add_argument("--what", choices=sorted(plotting.PLOT_COLUMNS))
    p.add_argument("--params", help="parameter file written by fit or select")
    p.add_argument("--data", help="observation CSV, for trajectories and residuals")
    p.add_argument("--points", type=int)
    return parser


def resolve_config(args) -> sio.RunConfig:
    raw, base = {}, os.getcwd()
    if args.config:
        raw = sio.load_config(args.config)
        base = os.path.dirname(os.path.abspath(args.config))
    cfg = sio.RunConfig.from_dict(raw, base_dir=base)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg.seed = args.seed
    if cfg.seed is not None:
        cfg.simulate = replace(cfg.simulate, seed=cfg.seed)
    if args.out:
        cfg.out = args.out
    if getattr(args, "data", None):
        cfg.data = os.path.abspath(args.data)
    if getattr(args, "init", None):
        cfg.init = os.path.abspath(args.init)
    if getattr(args, "replicates", None) is not None:
        cfg.study["replicates"] = args.replicates
    if getattr(args, "what", None):
        cfg.plot["what"] = args.what
    if getattr(args, "params", None):
        cfg.plot["params"] = os.path.abspath(args.params)
    if getattr(args, "points", None):
        cfg.plot["points"] = args.points
    if args.log_level:
        cfg.log_level = args.log_level.upper()
    return cfg


def _json(path, obj):
    with open(path, "w") as fh:
        json.dump(sio._plain(obj), fh, indent=2, default=float)


def _load_data(cfg):
    if not cfg.data:
        raise ConfigError("no observation file: set 'data' in the config or pass --data")
    try:
        return sio.ingest(cfg.data, cfg.time_window)
    except OSError as exc:
        raise DataError(f"cannot read {cfg.data}: {exc}") from exc


def _start(cfg, data, basis):
    if not cfg.init:
        return None
    params, init_basis, _ = sio.load_params(cfg.init)
    if init_basis.M != basis.M:
        raise ConfigError(f"init has {init_basis.M} coefficients, the basis needs {basis.M}")
    if params.theta.size != data.n or params.a.size != data.N_dot:
        raise ConfigError("init parameters do not match the data dimensions")
    return params


# commands -------------------------------------------------------------------

def cmd_simulate(cfg, out):
    s = simulate(cfg.simulate)
    path = os.path.join(out, "observations.csv")
    sio.emit(s.data, path)
    # stored with centred θ so it can seed a fit directly
    sio.save_params(os.path.join(out, "truth.json"), s.truth.identified(), s.basis, s.data)
    return [path]


def cmd_fit(cfg, out):
    if cfg.basis is None:
        raise ConfigError("fit needs a 'basis' section")
    data = _load_data(cfg)
    r = fit(data, cfg.basis, cfg.fit, init=_start(cfg, data, cfg.basis))
    p = r.params
    sio.save_params(os.path.join(out, "params.json"), p, cfg.basis, data,
                    {"lambda1": r.lambda1, "lambda2": r.lambda2})
    r.write_trace(os.path.join(out, "trace.csv"))
    ev_resid = residuals(p, data, cfg.basis, cfg.fit.h)
    diag = {"converged": r.converged, "iters": r.iters, "loss": r.loss,
            "lambda1": r.lambda1, "lambda2": r.lambda2, "notes": r.notes,
            "rss": float(ev_resid @ ev_resid), "m": data.m_dotdot, "n": data.n,
            "N": data.N_dot}
    try:
        v = variance_estimates(p, data, ev_resid, cfg.basis.M, None)
        diag["variances"] = {"sigma_eps2": v.sigma_eps2, "sigma_a2": v.sigma_a2,
                             "sigma_theta2": v.sigma_theta2}
    except SemiodeError as exc:
        diag["variances"] = f"unavailable: {exc}"
    _json(os.path.join(out, "diagnostics.json"), diag)
    plotting.plot_residuals(p, data, cfg.basis, os.path.join(out, "residuals"), cfg.fit.h)
    if not r.ok:
        raise FitError(f"fit did not converge (iterations {r.iters})", r.trace)
    return [os.path.join(out, "params.json")]


def cmd_select(cfg, out):
    data = _load_data(cfg)
    try:
        report = model_search(data, cfg.grid, cfg.fit)
    except SelectionError as exc:
        exc.report.write_csv(os.path.join(out, "cv_report.csv"))
        raise
    path = os.path.join(out, "cv_report.csv")
    report.write_csv(path)
    sel = report.selected
    r = report.fits[sel.model_id]
    sio.save_params(os.path.join(out, "params.json"), r.params, sel.basis, data,
                    {"model_id": sel.model_id, "lambda1": r.lambda1, "lambda2": r.lambda2})
    return [path]


def cmd_study(cfg, out):
    st = cfg.study

    def progress(row):
        log.info("replicate %s done in %ss %s", row["replicate"], row["seconds"],
                 row.get("error") or "")

    rep = run_study(cfg.simulate, cfg.grid, cfg.fit, int(st["replicates"]),
                    st.get("reference"), bool(st.get("select", True)), progress=progress)
    path = os.path.join(out, "study.csv")
    rep.write_csv(path)
    rep.write_tables(os.path.join(out, "study_tables.csv"))
    _json(os.path.join(out, "summary.json"), rep.summary())
    return [path]


def cmd_plot(cfg, out):
    what = cfg.plot["what"]
    if not cfg.plot.get("params"):
        raise ConfigError("plot needs a parameter file: set plot.params or pass --params")
    params, basis, raw = sio.load_params(cfg.plot["params"])
    window = raw.get("time_window") or [0.0, 1.0]
    scale = float(window[1]) - float(window[0])
    stem = os.path.join(out, what)
    if what in ("g", "regr"):
        fn = plotting.plot_g if what == "g" else plotting.plot_regr
        return list(fn(basis, params.beta, stem, scale, int(cfg.plot["points"])))
    data = _load_data(cfg)
    if params.theta.size != data.n or params.a.size != data.N_dot:
        raise ConfigError("parameter file does not match the data dimensions")
    if what == "trajectories":
        return list(plotting.plot_trajectories(params, data, basis, stem, cfg.fit.h))
    return list(plotting.plot_residuals(params, data, basis, stem, cfg.fit.h))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "select": cmd_select,
            "study": cmd_study, "plot": cmd_plot}


def _exit_code(exc):
    if isinstance(exc, SemiodeError):
        return exc.exit_code
    if isinstance(exc, (FloatingPointError, np.linalg.LinAlgError)):
        return NumericError.exit_code
    return 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        logging.basicConfig(level=getattr(logging, cfg.log_level, logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        os.makedirs(cfg.out, exist_ok=True)
        sio.write_config_echo(cfg, cfg.out)
        written = COMMANDS[args.command](cfg, cfg.out)
        for p in written:
            print(p)
        return 0
    except (SemiodeError, FloatingPointError, np.linalg.LinAlgError, OSError) as exc:
        code = _exit_code(exc)
        if isinstance(exc, OSError):
            code = 1
        print(json.dumps({"error": type(exc).__name__, "exit_code": code,
                          "message": str(exc)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
