"""Trajectories of x' = e^θ g_β(x) and their parameter sensitivities.

Everything here is vectorised over a batch of curves: ``a`` and ``theta``
have one entry per curve and ``beta`` is either shared (shape ``(M,)``) or
per curve (shape ``(C, M)``).

Grids follow the coarsening rule of the classical scheme: the trajectory is
solved with step ``h``, first-order sensitivities with step ``2h`` (their RK4
half-steps fall on trajectory nodes) and second-order ones with step ``4h``.
Values at off-grid times come from cubic Hermite interpolation using the
ODE right-hand side as the nodal derivative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline, PPoly

from .basis import SplineBasis
from .errors import NumericError, PreconditionError

POSITIVITY_FLOOR = 1e-6


def rk4_step(f, t, y, h):
    """One classical Runge-Kutta step for y' = f(t, y)."""
    if h <= 0:
        raise ValueError("h must be positive")
    k1 = f(t, y)
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    out = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite RK4 step at t={t!r}, y={y!r}")
    return out


def n_steps(h: float) -> int:
    n = int(round(1.0 / h))
    if n < 1 or abs(n * h - 1.0) > 1e-9:
        raise ValueError(f"h={h} does not divide [0, 1] into an integer number of steps")
    return n


@dataclass
class VectorField:
    """x' = e^θ Σ β_k φ_k(x), batched over curves."""

    basis: SplineBasis
    beta: np.ndarray
    theta: np.ndarray | float = 0.0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.beta.shape[-1] != self.basis.M:
            raise ValueError(f"beta has {self.beta.shape[-1]} entries, basis has M={self.basis.M}")

    @property
    def scale(self):
        cache = self.__dict__.setdefault("_splines", {})
        if "scale" not in cache:
            cache["scale"] = np.exp(self.theta)
        return cache["scale"]

    def _spline(self, deriv_order):
        # shared β: piecewise-polynomial coefficients are much cheaper than a design matrix
        cache = self.__dict__.setdefault("_splines", {})
        if deriv_order not in cache:
            b = self.basis
            d = b.degree
            # repeated end knots with zero coefficients widen the base
            # interval to the full support without changing any φ_k
            fk = b.full_knots
            pl = d + 1 - int(np.sum(fk == fk[0]))
            pr = d + 1 - int(np.sum(fk == fk[-1]))
            t = np.concatenate([[fk[0]] * pl, fk, [fk[-1]] * pr])
            coef = np.zeros(len(t) - d - 1)
            coef[pl + b.keep] = self.beta * b.scale
            spl = BSpline(t, coef, d, extrapolate=False)
            pp = PPoly.from_spline(spl.derivative(deriv_order) if deriv_order else spl)
            # keep only the nonempty pieces inside the support
            brk, c = pp.x, pp.c
            keep = (np.diff(brk) > 0) & (brk[:-1] >= fk[0]) & (brk[1:] <= fk[-1])
            left, c = brk[:-1][keep], c[:, keep]
            # zero pieces below the support and just above its closed right end
            edges = np.concatenate([left, [np.nextafter(fk[-1], np.inf)]])
            base = np.concatenate([[fk[0]], left, [fk[-1]]])
            zero = np.zeros((c.shape[0], 1))
            cache[deriv_order] = (edges, base, np.hstack([zero, c, zero]))
        return cache[deriv_order]

    def g(self, x, deriv_order=0):
        """g_β^{(j)}(x) without the e^θ factor; x has shape (C,) or (C, ...)."""
        x = np.asarray(x, dtype=float)
        if self.beta.ndim == 1 and deriv_order <= self.basis.degree:
            edges, base, c = self._spline(deriv_order)
            i = edges.searchsorted(x, side="right")
            dx = x - base[i]
            out = c[0][i]
            for row in c[1:]:
                out = out * dx + row[i]
            return out
        design = self.basis.design(x.ravel(), deriv_order)
        if self.beta.ndim == 1:
            return (design @ self.beta).reshape(x.shape)
        des = design.reshape(x.shape + (self.basis.M,))
        b = self.beta.reshape((self.beta.shape[0],) + (1,) * (x.ndim - 1) + (self.basis.M,))
        return (des * b).sum(-1)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return _expand(self.scale, x) * self.g(x)


def _expand(v, like):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def solve_trajectory(field: VectorField, a, h: float) -> np.ndarray:
    """Trajectory values on {0, h, ..., 1}; shape (C, n+1), or (n+1,) for scalar a."""
    scalar = np.ndim(a) == 0
    y = np.atleast_1d(np.asarray(a, dtype=float)).copy()
    n = n_steps(h)
    out = np.empty((y.shape[0], n + 1))
    out[:, 0] = y
    for m in range(n):
        y = rk4_step(field, m * h, y, h)
        out[:, m + 1] = y
    return out[0] if scalar else out


def hermite(values, rates, H, curve_idx, times):
    """Cubic Hermite interpolation of gridded paths at per-observation times."""
    K = values.shape[1] - 1
    s = np.asarray(times, dtype=float) / H
    idx = np.clip(np.floor(s).astype(int), 0, K - 1)
    u = s - idx
    u2 = u * u
    u3 = u2 * u
    h00 = 2 * u3 - 3 * u2 + 1
    h10 = u3 - 2 * u2 + u
    h01 = -2 * u3 + 3 * u2
    h11 = u3 - u2
    q0 = values[curve_idx, idx]
    q1 = values[curve_idx, idx + 1]
    d0 = rates[curve_idx, idx]
    d1 = rates[curve_idx, idx + 1]
    ex = (slice(None),) + (None,) * (q0.ndim - 1)
    return (h00[ex] * q0 + (h10 * H)[ex] * d0 + h01[ex] * q1 + (h11 * H)[ex] * d1)


@dataclass
class TrajectoryBundle:
    """Batch of solved curves with optional sensitivity and Hessian paths.

    Paths are stored as (values, rates) on their own grids: ``x`` on step
    ``h``, ``sens_*`` on ``2h`` and ``hess_*`` on ``4h``.
    """

    field: VectorField
    h: float
    x: np.ndarray
    x_rate: np.ndarray
    paths: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def t_grid(self):
        return np.linspace(0.0, 1.0, self.x.shape[1])

    @property
    def a(self):
        return self.x[:, 0]

    def step_of(self, name):
        return self.h * (2 if name.startswith("sens") else 4)

    def grid_of(self, name):
        if name == "x":
            return self.t_grid
        return np.linspace(0.0, 1.0, self.paths[name][0].shape[1])

    def __getattr__(self, name):
        if name.startswith(("sens_", "hess_")):
            paths = self.__dict__.get("paths", {})
            if name in paths:
                return paths[name][0]
            raise AttributeError(f"{name} has not been computed")
        raise AttributeError(name)

    # cached fine-grid quantities -------------------------------------------
    def fine(self, key):
        if key not in self._cache:
            fld = self.field
            if key in ("g0", "g1", "g2"):
                self._cache[key] = fld.g(self.x, int(key[1]))
            elif key in ("phi0", "phi1"):
                d = int(key[3])
                self._cache[key] = fld.basis.design(self.x.ravel(), d).reshape(
                    self.x.shape + (fld.basis.M,))
        return self._cache[key]

    def at_times(self, curve_idx, times, names=None):
        """Interpolate the requested paths at observation times."""
        curve_idx = np.asarray(curve_idx, dtype=int)
        times = np.asarray(times, dtype=float)
        if np.any(times < -1e-12) or np.any(times > 1 + 1e-12):
            raise ValueError("observation times must lie in [0, 1]")
        names = ["x", *self.paths] if names is None else names
        out = {}
        for name in names:
            if name == "x":
                out["x"] = hermite(self.x, self.x_rate, self.h, curve_idx, times)
            else:
                vals, rates = self.paths[name]
                out[name] = hermite(vals, rates, self.step_of(name), curve_idx, times)
        return out


def solve_bundle(field: VectorField, a, h: float) -> TrajectoryBundle:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if np.ndim(field.theta) == 0:
        field = VectorField(field.basis, field.beta, np.full(a.shape, float(field.theta)))
    x = solve_trajectory(field, a, h)
    rate = _expand(field.scale, x) * field.g(x)
    return TrajectoryBundle(field=field, h=h, x=x, x_rate=rate)


def eval_at_times(bundle: TrajectoryBundle, times, curve_idx=None):
    """Trajectory values at off-grid times (cubic Hermite, O(h^4))."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(times > 1):
        raise ValueError("times must lie in [0, 1]")
    if curve_idx is None:
        if bundle.x.shape[0] != 1:
            raise ValueError("curve_idx is required for multi-curve bundles")
        curve_idx = np.zeros(times.shape, dtype=int)
    return hermite(bundle.x, bundle.x_rate, bundle.h, curve_idx, times)


FIRST = ("sens_a", "sens_theta", "sens_beta")
SECOND = ("hess_a_a", "hess_theta_theta", "hess_beta_beta", "hess_theta_beta")
_NEEDS = {
    "sens_a": ("g1",),
    "sens_theta": ("g0", "g1"),
    "sens_beta": ("g1", "phi0"),
    "hess_a_a": ("g1", "g2", "sens_a"),
    "hess_theta_theta": ("g0", "g1", "g2", "sens_theta"),
    "hess_beta_beta": ("g1", "g2", "phi1", "sens_beta"),
    "hess_theta_beta": ("g1", "g2", "phi0", "phi1", "sens_theta", "sens_beta"),
}


def _forcing(name, q, e):
    """Inhomogeneous term of the variational ODE for path ``name``.

    Every path p obeys p' = e^θ g'(X) p + F_p; ``q`` holds the quantities F_p
    depends on, all sharing a leading shape that ``e`` already matches.
    """
    if name == "sens_a":
        return np.zeros_like(q["g1"])
    if name == "sens_theta":
        return e * q["g0"]
    if name == "sens_beta":
        return e[..., None] * q["phi0"]
    if name == "hess_a_a":
        return e * q["sens_a"] ** 2 * q["g2"]
    if name == "hess_theta_theta":
        st = q["sens_theta"]
        return e * (q["g0"] + 2 * st * q["g1"] + st ** 2 * q["g2"])
    if name == "hess_beta_beta":
        sb = q["sens_beta"]
        cross = sb[..., :, None] * q["phi1"][..., None, :]
        return e[..., None, None] * (cross + np.swapaxes(cross, -1, -2)
                                     + sb[..., :, None] * sb[..., None, :] * q["g2"][..., None, None])
    if name == "hess_theta_beta":
        sb = q["sens_beta"]
        st = q["sens_theta"][..., None]
        return e[..., None] * (sb * q["g1"][..., None] + q["phi0"] + st * q["phi1"]
                               + st * sb * q["g2"][..., None])
    raise KeyError(name)


class _Sampler:
    """Trajectory-derived quantities on grids or at arbitrary (curve, time) points."""

    def __init__(self, bundle):
        self.b = bundle
        self.e = bundle.field.scale

    def grid(self, stride, keys):
        """Quantities at every ``stride``-th trajectory node."""
        out = {}
        for k in keys:
            if k.startswith("sens"):
                vals = self.b.paths[k][0]
                out[k] = vals[:, :: stride // 2]
            else:
                out[k] = self.b.fine(k)[:, ::stride]
        return out

    def at(self, curves, times, keys):
        b = self.b
        fld = b.field
        x = hermite(b.x, b.x_rate, b.h, curves, times)
        beta = fld.beta if fld.beta.ndim == 1 else fld.beta[curves]
        out = {}
        designs = {}
        for k in keys:
            if k.startswith("sens"):
                vals, rates = b.paths[k]
                out[k] = hermite(vals, rates, 2 * b.h, curves, times)
            elif k.startswith("phi"):
                out[k] = designs.setdefault(int(k[3]), fld.basis.design(x, int(k[3])))
            else:
                d = designs.setdefault(int(k[1]), fld.basis.design(x, int(k[1])))
                out[k] = (d * beta).sum(-1) if beta.ndim == 2 else d @ beta
        return out


def _knot_crossings(bundle, stride):
    """Steps (of ``stride`` trajectory nodes) during which a curve crosses a knot.

    Returns {step: (curves, bounds)} where ``bounds`` holds the sorted
    sub-step boundaries, padded with the step end.
    """
    b = bundle
    xs = b.x[:, ::stride]
    H = stride * b.h
    knots = b.field.basis.breakpoints()
    lo = np.minimum(xs[:, :-1], xs[:, 1:])
    hi = np.maximum(xs[:, :-1], xs[:, 1:])
    hit = (knots[None, None, :] > lo[..., None]) & (knots[None, None, :] < hi[..., None])
    cs, ks, js = np.nonzero(hit)
    if cs.size == 0:
        return {}
    # bisection on the Hermite trajectory (monotone within a step)
    ta = ks * H
    tb = ta + H
    xa = xs[cs, ks]
    target = knots[js]
    up = xs[cs, ks + 1] > xa
    for _ in range(60):
        tm = (ta + tb) / 2
        xm = hermite(b.x, b.x_rate, b.h, cs, tm)
        below = (xm < target) == up
        ta = np.where(below, tm, ta)
        tb = np.where(below, tb, tm)
    tau = (ta + tb) / 2
    out = {}
    for k in np.unique(ks):
        sel = ks == k
        curves, inv = np.unique(cs[sel], return_inverse=True)
        taus = [np.sort(tau[sel][inv == i]) for i in range(curves.size)]
        width = max(len(v) for v in taus) + 2
        bounds = np.full((curves.size, width), (k + 1) * H)
        bounds[:, 0] = k * H
        for i, v in enumerate(taus):
            bounds[i, 1:1 + len(v)] = v
        out[int(k)] = (curves, bounds)
    return out


def _crossing_samples(sampler, crossings, keys):
    """Trajectory quantities at the RK4 stage times of every split sub-step.

    These depend only on the frozen trajectory, so they are evaluated in one
    batch; the result maps step -> dict of arrays shaped (curves, subs, 3, ...).
    """
    if not crossings:
        return {}
    parts, cs, ts = [], [], []
    for k, (curves, bounds) in crossings.items():
        u0 = bounds[:, :-1]
        du = bounds[:, 1:] - u0
        stage = np.stack([u0, u0 + du / 2, u0 + du], axis=-1)
        parts.append((k, stage.shape))
        cs.append(np.broadcast_to(curves[:, None, None], stage.shape).ravel())
        ts.append(stage.ravel())
    q = sampler.at(np.concatenate(cs), np.concatenate(ts), keys)
    out = {}
    pos = 0
    for k, shape in parts:
        size = int(np.prod(shape))
        out[k] = {key: v[pos:pos + size].reshape(shape + v.shape[1:]) for key, v in q.items()}
        pos += size
    return out


def _propagate(bundle, sampler, name, y0, stride, crossings, samples):
    """RK4 for p' = e^θ g'(X) p + F_p with steps of ``stride`` trajectory nodes.

    Half-steps fall on nodes spaced ``stride/2``.  Steps in which a curve
    crosses a knot are split at the crossing times, because g'' has a kink
    there and a plain step would lose its order.
    """
    H = stride * bundle.h
    keys = _NEEDS[name]
    q = sampler.grid(stride // 2, keys)
    e = sampler.e[:, None]
    coef = e * q["g1"]
    F = _forcing(name, q, e)
    C, L = coef.shape
    K = (L - 1) // 2
    y = np.broadcast_to(np.asarray(y0, dtype=float), (C,) + F.shape[2:]).copy()
    vals = np.empty((C, K + 1) + y.shape[1:])
    rates = np.empty_like(vals)
    vals[:, 0] = y

    def rhs(i, yy):
        return _expand(coef[:, i], yy) * yy + F[:, i]

    # inside split steps the first-order paths a Hessian depends on ride
    # along with it instead of being interpolated across the kink
    deps = [k for k in keys if k.startswith("sens")]

    def rhs_at(qq, ec, state):
        qq = dict(qq)
        c = ec * qq["g1"]
        out = {}
        for d in deps:
            out[d] = _expand(c, state[d]) * state[d] + _forcing(d, qq, ec)
            qq[d] = state[d]
        out[name] = _expand(c, state[name]) * state[name] + _forcing(name, qq, ec)
        return out

    def axpy(state, step, slope):
        return {key: state[key] + _expand(step, state[key]) * slope[key] for key in state}

    for k in range(K):
        i = 2 * k
        k1 = rhs(i, y)
        rates[:, k] = k1
        k2 = rhs(i + 1, y + H / 2 * k1)
        k3 = rhs(i + 1, y + H / 2 * k2)
        k4 = rhs(i + 2, y + H * k3)
        y_next = y + H / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if k in crossings:
            curves, bounds = crossings[k]
            qs = samples[k]
            ec = sampler.e[curves]
            st = {name: y[curves]}
            for d in deps:
                st[d] = sampler.b.paths[d][0][curves, k * stride // 2]
            for j in range(bounds.shape[1] - 1):
                du = bounds[:, j + 1] - bounds[:, j]
                q0, qm, q1 = ({key: v[:, j, s] for key, v in qs.items()} for s in range(3))
                s1 = rhs_at(q0, ec, st)
                s2 = rhs_at(qm, ec, axpy(st, du / 2, s1))
                s3 = rhs_at(qm, ec, axpy(st, du / 2, s2))
                s4 = rhs_at(q1, ec, axpy(st, du, s3))
                st = {key: st[key] + _expand(du / 6, st[key]) * (
                    s1[key] + 2 * s2[key] + 2 * s3[key] + s4[key]) for key in st}
            y_next[curves] = st[name]
        y = y_next
        vals[:, k + 1] = y
    rates[:, K] = rhs(2 * K, y)
    if not np.all(np.isfinite(vals)):
        bad = np.nonzero(~np.isfinite(vals.reshape(C, -1)).all(1))[0]
        raise NumericError(f"{name} diverged for curve(s) {bad.tolist()}")
    return vals, rates


def propagate_sensitivities(bundle: TrajectoryBundle, order: str = "first", which=None):
    """Fill sensitivity (and Hessian) paths by RK4 on the linear variational ODEs.

    The trajectory is treated as a known coefficient.  ``which`` restricts
    the computed paths; second-order paths pull in the first-order ones they
    depend on.
    """
    if order not in ("first", "second"):
        raise ValueError("order must be 'first' or 'second'")
    want = set(FIRST if order == "first" else FIRST + SECOND) if which is None else set(which)
    for name in list(want):
        want.update(k for k in _NEEDS[name] if k.startswith("sens"))
    n = bundle.x.shape[1] - 1
    if n % 4:
        raise ValueError("number of trajectory steps must be a multiple of 4")
    sampler = _Sampler(bundle)
    P = bundle.paths
    firsts = [p for p in FIRST if p in want and p not in P]
    qkeys = ("g0", "g1", "g2", "phi0", "phi1")
    if firsts:
        cross = _knot_crossings(bundle, 2)
        samples = _crossing_samples(sampler, cross, qkeys)
        for name in firsts:
            y0 = 1.0 if name == "sens_a" else 0.0
            P[name] = _propagate(bundle, sampler, name, y0, 2, cross, samples)
    seconds = [p for p in SECOND if p in want and p not in P]
    if seconds:
        cross = _knot_crossings(bundle, 4)
        samples = _crossing_samples(sampler, cross, qkeys)
        for name in seconds:
            P[name] = _propagate(bundle, sampler, name, 0.0, 4, cross, samples)
    return bundle


# closed forms for positive g ------------------------------------------------

_GL_Z, _GL_W = np.polynomial.legendre.leggauss(6)


def _check_positive(g_grid):
    lo = g_grid.min(axis=1)
    hi = np.abs(g_grid).max(axis=1)
    bad = (lo <= POSITIVITY_FLOOR * hi) | (hi == 0)
    if np.any(bad):
        raise PreconditionError(
            f"g_beta is not positive along curve(s) {np.nonzero(bad)[0].tolist()}")


def _split_gauss(lo, hi, cuts):
    """Gauss-Legendre nodes/weights on [lo, hi] split at every cut inside it.

    ``lo``/``hi`` have shape S; returns nodes and weights of shape S + (P,).
    """
    lo_, hi_ = lo[..., None], hi[..., None]
    hits = (cuts > np.minimum(lo_, hi_)) & (cuts < np.maximum(lo_, hi_))
    width = int(hits.sum(-1).max()) if hits.size else 0
    # only cuts strictly inside an interval matter; the rest are padded with
    # hi, which sorts to the end in the direction of integration
    inner = np.sort(np.where(hits, cuts, hi_), axis=-1)
    inner = np.where(hi_ >= lo_, inner, inner[..., ::-1])[..., :width]
    b = np.concatenate([lo_, inner, hi_], axis=-1)
    a0 = b[..., :-1, None]
    half = (b[..., 1:, None] - a0) / 2
    nodes = a0 + half * (_GL_Z + 1)
    weights = half * _GL_W
    shape = lo.shape + (-1,)
    return nodes.reshape(shape), weights.reshape(shape)


def _cumulate(pieces, K1):
    out = np.zeros((pieces.shape[0], K1) + pieces.shape[2:])
    out[:, 1:] = np.cumsum(pieces, axis=1)
    return out


def _state_cumint(fld: VectorField, xg, integrand):
    """Cumulative ∫_{x_0}^{x_k} integrand(φ(x), g(x), g'(x)) dx along gridded states.

    ``xg`` has shape (C, K+1) and is increasing along each row.
    """
    nodes, w = _split_gauss(xg[:, :-1], xg[:, 1:], fld.basis.breakpoints())
    M = fld.basis.M
    phi = fld.basis.design(nodes.ravel(), 0).reshape(nodes.shape + (M,))
    vals = integrand(phi, fld.g(nodes), fld.g(nodes, 1))
    w = w.reshape(w.shape + (1,) * (vals.ndim - w.ndim))
    return _cumulate((vals * w).sum(axis=2), xg.shape[1])


def _time_cumint(bundle, sampler, stride, keys, integrand):
    """Cumulative ∫_0^{t_k} integrand(q(s)) ds on the ``stride`` grid, split at knot crossings."""
    H = stride * bundle.h
    C = bundle.x.shape[0]
    K = (bundle.x.shape[1] - 1) // stride
    lo = np.broadcast_to(np.arange(K) * H, (C, K)).copy()
    hi = lo + H
    cross = _knot_crossings(bundle, stride)
    width = max((b.shape[1] for _, b in cross.values()), default=2)
    bounds = np.empty((C, K, width))
    bounds[...] = hi[..., None]
    bounds[..., 0] = lo
    for k, (curves, b) in cross.items():
        bounds[curves, k, :b.shape[1]] = b
    a0 = bounds[..., :-1, None]
    half = (bounds[..., 1:, None] - a0) / 2
    times = (a0 + half * (_GL_Z + 1)).reshape(C, K, -1)
    w = (half * _GL_W).reshape(C, K, -1)
    curves = np.broadcast_to(np.arange(C)[:, None, None], times.shape)
    q = sampler.at(curves.ravel(), times.ravel(), keys)
    ec = sampler.e[curves.ravel()]
    vals = integrand(q, ec)
    vals = vals.reshape(times.shape + vals.shape[1:])
    w = w.reshape(w.shape + (1,) * (vals.ndim - w.ndim))
    return _cumulate((vals * w).sum(axis=2), K + 1)


def closed_form_sensitivities(bundle: TrajectoryBundle):
    """(sens_a, sens_theta, sens_beta) on the 2h grid from the explicit solutions."""
    fld = bundle.field
    g0 = bundle.fine("g0")
    _check_positive(g0)
    x2 = bundle.x[:, ::2]
    G = g0[:, ::2]
    t = np.linspace(0.0, 1.0, x2.shape[1])
    e = fld.scale[:, None]
    sens_a = G / G[:, :1]
    sens_theta = e * t * G
    dF = _state_cumint(fld, x2, lambda phi, g, g1: phi / (g ** 2)[..., None])
    sens_beta = G[..., None] * dF
    return sens_a, sens_theta, sens_beta


def _closed_first_paths(bundle):
    """Closed-form first-order paths with their ODE right-hand sides as rates."""
    fld = bundle.field
    e = fld.scale
    sa, st, sb = closed_form_sensitivities(bundle)
    g0, g1 = bundle.fine("g0")[:, ::2], bundle.fine("g1")[:, ::2]
    c = e[:, None] * g1
    return {
        "sens_a": (sa, c * sa),
        "sens_theta": (st, c * st + e[:, None] * g0),
        "sens_beta": (sb, c[..., None] * sb + e[:, None, None] * bundle.fine("phi0")[:, ::2]),
    }


def closed_form_hessians(bundle: TrajectoryBundle, beta_form: str = "alt"):
    """(hess_a_a, hess_theta_theta, hess_beta_beta, hess_theta_beta) on the 4h grid.

    ``beta_form='alt'`` evaluates the time-integral representation built on
    the closed-form first-order paths; ``'integral'`` uses state-space
    integrals only.  The θβ block always uses its time-integral form.
    """
    if beta_form not in ("alt", "integral"):
        raise ValueError("beta_form must be 'alt' or 'integral'")
    fld = bundle.field
    g0 = bundle.fine("g0")
    _check_positive(g0)
    e = fld.scale[:, None]
    x4 = bundle.x[:, ::4]
    G = g0[:, ::4]
    G1 = bundle.fine("g1")[:, ::4]
    t = np.linspace(0.0, 1.0, x4.shape[1])
    hess_aa = G / G[:, :1] ** 2 * (G1 - G1[:, :1])
    hess_tt = e * G * (t + e * t ** 2 * G1)

    shadow = TrajectoryBundle(field=fld, h=bundle.h, x=bundle.x, x_rate=bundle.x_rate,
                              paths=_closed_first_paths(bundle), _cache=bundle._cache)
    sampler = _Sampler(shadow)

    if beta_form == "alt":
        def f_bb(q, ec):
            sb, p1 = q["sens_beta"], q["phi1"]
            cross = sb[..., :, None] * p1[..., None, :]
            return (ec / q["g0"])[:, None, None] * (
                cross + np.swapaxes(cross, -1, -2)
                + sb[..., :, None] * sb[..., None, :] * q["g2"][:, None, None])

        hess_bb = G[..., None, None] * _time_cumint(
            shadow, sampler, 4, ("g0", "g2", "phi1", "sens_beta"), f_bb)
    else:
        dF = _state_cumint(fld, x4, lambda phi, g, g1: phi / (g ** 2)[..., None])
        inner = _state_cumint(
            fld, x4,
            lambda phi, g, g1: phi[..., :, None] * phi[..., None, :] / (g ** 3)[..., None, None])
        P0 = bundle.fine("phi0")[:, ::4]
        term = P0[..., :, None] * dF[..., None, :]
        hess_bb = (term + np.swapaxes(term, -1, -2)
                   + (G * G1)[..., None, None] * dF[..., :, None] * dF[..., None, :]
                   - 2 * G[..., None, None] * inner)

    def f_tb(q, ec):
        sb = q["sens_beta"]
        st = q["sens_theta"][:, None]
        return (ec / q["g0"])[:, None] * (st * q["phi1"] + sb * q["g1"][:, None] + q["phi0"]
                                          + st * sb * q["g2"][:, None])

    hess_tb = G[..., None] * _time_cumint(
        shadow, sampler, 4, ("g0", "g1", "g2", "phi0", "phi1", "sens_theta", "sens_beta"), f_tb)
    return hess_aa, hess_tt, hess_bb, hess_tb


def closed_form_paths(bundle: TrajectoryBundle, order="first"):
    """Install closed-form paths in ``bundle`` (with ODE right-hand sides as rates)."""
    bundle.paths.update(_closed_first_paths(bundle))
    if order == "second":
        haa, htt, hbb, htb = closed_form_hessians(bundle)
        sampler = _Sampler(bundle)
        q = sampler.grid(4, ("g0", "g1", "g2", "phi0", "phi1",
                             "sens_a", "sens_theta", "sens_beta"))
        e = sampler.e[:, None]
        c = e * q["g1"]
        for name, vals in (("hess_a_a", haa), ("hess_theta_theta", htt),
                           ("hess_beta_beta", hbb), ("hess_theta_beta", htb)):
            bundle.paths[name] = (vals, _expand(c, vals) * vals + _forcing(name, q, e))
    return bundle
