"""Plot-point CSVs and minimal standalone SVG 1.1 line charts.

Every figure is written twice: a CSV holding the plotted points and an SVG
with axes, tick labels and one polyline (or marker set) per series.  Rates
are reported in original units, i.e. per unit of original time.
"""
from __future__ import annotations

import csv
from xml.sax.saxutils import escape

import numpy as np

from .basis import SplineBasis, g_value
from .model import Dataset, Parameters, evaluate
from .ode import VectorField, solve_bundle

PLOT_COLUMNS = {
    "g": ("x", "g"),
    "regr": ("x", "g", "g_prime"),
    "trajectories": ("subject_id", "curve_id", "time", "value", "kind"),
    "residuals": ("subject_id", "curve_id", "time", "residual"),
}

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
            "#7f7f7f")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 1e-9 * step, step)


def svg_chart(series, path, title="", xlabel="", ylabel="", width=640, height=420,
              markers=False, hline=None):
    """Write a line chart.  ``series`` is a list of (label, x, y)."""
    ml, mr, mt, mb = 70, 20, 36, 50
    xs = np.concatenate([np.asarray(s[1], float) for s in series]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(s[2], float) for s in series]) if series else np.zeros(1)
    fin = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = (xs[fin], ys[fin]) if fin.any() else (np.zeros(1), np.zeros(1))
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if hline is not None:
        y0, y1 = min(y0, hline), max(y1, hline)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - ml - mr, height - mt - mb

    def X(v):
        return ml + (np.asarray(v, float) - x0) / (x1 - x0) * pw

    def Y(v):
        return mt + ph - (np.asarray(v, float) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
           f'font-size="15">{escape(title)}</text>',
           f'<g stroke="black" stroke-width="1"><line x1="{ml}" y1="{mt + ph}" '
           f'x2="{ml + pw}" y2="{mt + ph}"/><line x1="{ml}" y1="{mt}" x2="{ml}" '
           f'y2="{mt + ph}"/></g>']
    font = 'font-family="sans-serif" font-size="11"'
    for t in _ticks(x0, x1):
        px = float(X(t))
        out.append(f'<line x1="{px:.2f}" y1="{mt + ph}" x2="{px:.2f}" y2="{mt + ph + 5}" '
                   f'stroke="black"/><text x="{px:.2f}" y="{mt + ph + 18}" '
                   f'text-anchor="middle" {font}>{t:.4g}</text>')
    for t in _ticks(y0, y1):
        py = float(Y(t))
        out.append(f'<line x1="{ml - 5}" y1="{py:.2f}" x2="{ml}" y2="{py:.2f}" '
                   f'stroke="black"/><text x="{ml - 8}" y="{py + 4:.2f}" '
                   f'text-anchor="end" {font}>{t:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
               f'{font}>{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" {font} '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    if hline is not None:
        py = float(Y(hline))
        out.append(f'<line x1="{ml}" y1="{py:.2f}" x2="{ml + pw}" y2="{py:.2f}" '
                   f'stroke="#999" stroke-dasharray="4 3"/>')
    for k, (label, x, y) in enumerate(series):
        colour = _PALETTE[k % len(_PALETTE)]
        px, py = X(x), Y(y)
        ok = np.isfinite(px) & np.isfinite(py)
        if markers:
            dots = "".join(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2"/>'
                           for a, b in zip(px[ok], py[ok]))
            out.append(f'<g fill="{colour}"><title>{escape(str(label))}</title>{dots}</g>')
        else:
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px[ok], py[ok]))
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                       f'points="{pts}"><title>{escape(str(label))}</title></polyline>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def plot_grid(basis: SplineBasis, points=512, x_range=None):
    lo, hi = x_range if x_range is not None else basis.domain
    return np.linspace(lo, hi, points)


def regr_points(basis: SplineBasis, beta, time_scale=1.0, points=512, x_range=None):
    """(x, g, g') on an evenly spaced grid, rates divided by ``time_scale``."""
    x = plot_grid(basis, points, x_range)
    g = g_value(basis, beta, x) / time_scale
    gp = g_value(basis, beta, x, 1) / time_scale
    return x, g, gp


def plot_g(basis, beta, stem, time_scale=1.0, points=512, x_range=None, units=None):
    x, g, _ = regr_points(basis, beta, time_scale, points, x_range)
    _write_rows(f"{stem}.csv", PLOT_COLUMNS["g"], zip(x, g))
    u = units or {}
    svg_chart([("g", x, g)], f"{stem}.svg", "Fitted gradient function g",
              f"x ({u.get('value', 'state')})",
              f"g(x) ({u.get('value', 'state')}/{u.get('time', 'time')})")
    return f"{stem}.csv", f"{stem}.svg"


def plot_regr(basis, beta, stem, time_scale=1.0, points=512, x_range=None, units=None):
    x, g, gp = regr_points(basis, beta, time_scale, points, x_range)
    _write_rows(f"{stem}.csv", PLOT_COLUMNS["regr"], zip(x, g, gp))
    u = units or {}
    svg_chart([("g_prime", x, gp)], f"{stem}.svg", "Fitted relative elemental growth rate",
              f"x ({u.get('value', 'state')})", f"g'(x) (1/{u.get('time', 'time')})",
              hline=0.0)
    return f"{stem}.csv", f"{stem}.svg"


def plot_trajectories(params: Parameters, data: Dataset, basis, stem, h=1 / 256,
                      max_curves=None):
    """Fitted paths on the solver grid with the observations overlaid."""
    T0, T1 = data.time_window
    fld = VectorField(basis, params.beta, params.theta[data.curve_subject])
    bundle = solve_bundle(fld, params.a, h)
    stride = max(1, (bundle.x.shape[1] - 1) // 128)
    tf, xf = bundle.t_grid[::stride], bundle.x[:, ::stride]
    rows, series = [], []
    C = data.N_dot if max_curves is None else min(max_curves, data.N_dot)
    for c in range(data.N_dot):
        sid, cid = data.subject_ids[data.curve_subject[c]], data.curve_ids[c]
        sl = data.curve_rows(c)
        for t, v in zip(tf, xf[c]):
            rows.append((sid, cid, T0 + t * (T1 - T0), v, "fitted"))
        for t, v in zip(data.times[sl], data.values[sl]):
            rows.append((sid, cid, T0 + t * (T1 - T0), v, "observed"))
        if c < C:
            series.append((cid, T0 + tf * (T1 - T0), xf[c]))
    _write_rows(f"{stem}.csv", PLOT_COLUMNS["trajectories"], rows)
    svg_chart(series, f"{stem}.svg", "Fitted trajectories", "time", "state")
    return f"{stem}.csv", f"{stem}.svg"


def plot_residuals(params: Parameters, data: Dataset, basis, stem, h=1 / 256):
    T0, T1 = data.time_window
    resid = evaluate(params, data, basis, h).resid
    t = T0 + data.times * (T1 - T0)
    rows = [(data.subject_ids[data.obs_subject[k]], data.curve_ids[data.obs_curve[k]], t[k],
             resid[k]) for k in range(data.m_dotdot)]
    _write_rows(f"{stem}.csv", PLOT_COLUMNS["residuals"], rows)
    series = []
    for i, sid in enumerate(data.subject_ids):
        k = data.obs_subject == i
        series.append((sid, t[k], resid[k]))
    svg_chart(series, f"{stem}.svg", "Residuals versus time", "time", "residual",
              markers=True, hline=0.0)
    return f"{stem}.csv", f"{stem}.svg"
