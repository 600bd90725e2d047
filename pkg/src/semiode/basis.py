"""B-spline representation of the gradient function g.

Two knot layouts are supported:

``centered``
    Each user knot is the centre of one basis function.  The knot list is
    extended by ``(degree + 1) // 2`` knots on the left and the remainder on
    the right, spaced like the adjacent pair, so ``K`` knots give ``K`` basis
    functions.  With knots ``0.1 + (1:M)/M`` this yields exactly ``M``
    uniform cubic B-splines.
``clamped``
    The conventional open knot vector on ``domain`` with boundary knots of
    multiplicity ``degree + 1``, giving ``K + degree + 1`` functions.

Outside the support of the knot vector every basis function is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LAYOUTS = ("centered", "clamped")
BOUNDARY_MODES = ("unconstrained", "zero_at_origin")


def _inv_gaps(t, q):
    """1/(t[i+q] - t[i]) with zero for degenerate (repeated-knot) gaps."""
    d = t[q:] - t[:-q]
    out = np.zeros_like(d)
    np.divide(1.0, d, out=out, where=d > 0)
    return out


def _raise_degree(x, t, lower, q):
    """Cox-de Boor step from degree q-1 values to degree q values."""
    inv = _inv_gaps(t, q)
    n = len(t) - q - 1
    left = (x[:, None] - t[None, :n]) * inv[None, :n] * lower[:, :n]
    right = (t[None, q + 1:q + 1 + n] - x[:, None]) * inv[None, 1:n + 1] * lower[:, 1:n + 1]
    return left + right


def _differentiate(t, lower, p):
    """Derivative of the degree-p family from the degree p-1 family."""
    inv = _inv_gaps(t, p)
    n = len(t) - p - 1
    return p * (inv[None, :n] * lower[:, :n] - inv[None, 1:n + 1] * lower[:, 1:n + 1])


def bspline_table(x, t, p, deriv=0):
    """All degree-``p`` B-splines on knot vector ``t`` (or their derivative).

    Returns an array of shape ``(len(x), len(t) - p - 1)``.  Points outside
    ``[t[0], t[-1]]`` evaluate to zero.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.asarray(t, dtype=float)
    if deriv > p:
        return np.zeros((x.shape[0], len(t) - p - 1))
    if deriv > 0:
        return _differentiate(t, bspline_table(x, t, p - 1, deriv - 1), p)
    # degree 0 indicators; the right end of the support closes the last
    # non-degenerate span so clamped bases are right-continuous there
    left = t[:-1]
    right = t[1:]
    b = ((x[:, None] >= left) & (x[:, None] < right)).astype(float)
    last = np.nonzero(right > left)[0][-1]
    b[x == t[-1], last] = 1.0
    for q in range(1, p + 1):
        b = _raise_degree(x, t, b, q)
    return b


@dataclass(frozen=True)
class SplineBasis:
    """Basis Φ_M used to represent g(x) = Σ β_k φ_k(x).

    ``domain`` is required for the clamped layout and derived (as the
    support of the extended knot vector) for the centered layout.
    """

    knots: tuple[float, ...]
    degree: int = 3
    layout: str = "centered"
    domain: tuple[float, float] | None = None
    boundary_mode: str = "unconstrained"
    normalized: bool = False

    full_knots: np.ndarray = field(init=False, repr=False, compare=False)
    keep: np.ndarray = field(init=False, repr=False, compare=False)
    scale: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError("knots must be strictly increasing")
        d = self.degree

        if self.layout == "centered":
            if len(knots) < 2:
                raise ValueError("centered layout needs at least two knots")
            n_left = (d + 1) // 2
            n_right = d + 1 - n_left
            dl = knots[1] - knots[0]
            dr = knots[-1] - knots[-2]
            t = np.concatenate([
                knots[0] - dl * np.arange(n_left, 0, -1),
                knots,
                knots[-1] + dr * np.arange(1, n_right + 1),
            ])
            support = (float(t[0]), float(t[-1]))
            if self.domain is not None and not np.allclose(self.domain, support):
                raise ValueError(
                    f"centered layout derives its domain {support}; got {self.domain}")
            object.__setattr__(self, "domain", support)
        else:
            if self.domain is None:
                raise ValueError("clamped layout requires a domain")
            lo, hi = (float(v) for v in self.domain)
            if not lo < hi:
                raise ValueError("domain must satisfy lo < hi")
            if knots and not (lo < knots[0] and knots[-1] < hi):
                raise ValueError("interior knots must lie strictly inside the domain")
            t = np.concatenate([[lo] * (d + 1), knots, [hi] * (d + 1)])
            object.__setattr__(self, "domain", (lo, hi))
        object.__setattr__(self, "full_knots", np.asarray(t, dtype=float))

        n_full = len(t) - d - 1
        keep = np.arange(n_full)
        if self.boundary_mode == "zero_at_origin":
            if self.layout == "clamped" and self.domain[0] != 0.0:
                raise ValueError("zero_at_origin with a clamped layout needs domain[0] == 0")
            v0 = bspline_table([0.0], t, d, 0)[0]
            v1 = bspline_table([0.0], t, d, 1)[0]
            keep = np.nonzero((np.abs(v0) < 1e-14) & (np.abs(v1) < 1e-14))[0]
        if keep.size == 0:
            raise ValueError("no basis functions left after applying boundary_mode")
        object.__setattr__(self, "keep", keep)
        object.__setattr__(self, "scale", np.ones(keep.size))
        if self.normalized:
            gram = _gram(self, 0)
            object.__setattr__(self, "scale", 1.0 / np.sqrt(np.diag(gram)))

    @property
    def M(self) -> int:
        return int(self.keep.size)

    def design(self, x, deriv_order: int = 0) -> np.ndarray:
        """Matrix of basis values, shape (len(x), M)."""
        if deriv_order not in (0, 1, 2):
            raise ValueError(f"deriv_order must be 0, 1 or 2, got {deriv_order}")
        full = bspline_table(x, self.full_knots, self.degree, deriv_order)
        return full[:, self.keep] * self.scale

    def breakpoints(self) -> np.ndarray:
        return np.unique(self.full_knots)

    def to_dict(self) -> dict:
        return {
            "knots": list(self.knots),
            "degree": self.degree,
            "layout": self.layout,
            "domain": list(self.domain),
            "boundary_mode": self.boundary_mode,
            "normalized": self.normalized,
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "SplineBasis":
        spec = dict(spec)
        layout = spec.get("layout", "centered")
        domain = spec.get("domain")
        if layout == "centered":
            domain = None
        return cls(
            knots=tuple(spec["knots"]),
            degree=int(spec.get("degree", 3)),
            layout=layout,
            domain=tuple(domain) if domain is not None else None,
            boundary_mode=spec.get("boundary_mode", "unconstrained"),
            normalized=bool(spec.get("normalized", False)),
        )


def eval_basis(basis: SplineBasis, x, deriv_order: int = 0) -> np.ndarray:
    """(φ_1^{(j)}(x), ..., φ_M^{(j)}(x)).  Scalar x gives a vector, array x a matrix."""
    scalar = np.ndim(x) == 0
    out = basis.design(np.atleast_1d(x), deriv_order)
    return out[0] if scalar else out


def g_value(basis: SplineBasis, beta, x, deriv_order: int = 0):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (basis.M,):
        raise ValueError(f"beta has shape {beta.shape}, basis has M={basis.M}")
    scalar = np.ndim(x) == 0
    out = basis.design(np.atleast_1d(x), deriv_order) @ beta
    return float(out[0]) if scalar else out


def _gauss_spans(breaks, n_points):
    """Gauss-Legendre nodes and weights over consecutive spans of ``breaks``."""
    z, w = np.polynomial.legendre.leggauss(n_points)
    a = np.asarray(breaks[:-1])
    b = np.asarray(breaks[1:])
    half = (b - a) / 2
    nodes = (a[:, None] + half[:, None] * (z[None, :] + 1)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _gram(basis: SplineBasis, deriv_order: int, lo=None, hi=None) -> np.ndarray:
    lo = basis.domain[0] if lo is None else lo
    hi = basis.domain[1] if hi is None else hi
    bp = basis.breakpoints()
    bp = np.unique(np.concatenate([[lo, hi], bp[(bp > lo) & (bp < hi)]]))
    if bp.size < 2:
        return np.zeros((basis.M, basis.M))
    nodes, weights = _gauss_spans(bp, 2 * basis.degree)
    full = bspline_table(nodes, basis.full_knots, basis.degree, deriv_order)[:, basis.keep]
    gram = (full * weights[:, None]).T @ full
    return gram


@dataclass(frozen=True)
class PenaltyMatrix:
    """Quadratic boundary penalty βᵀBβ = λ_R ∫_A^{2A} (g')² dx."""

    B: np.ndarray
    A: float
    lambda_R: float

    def quadratic(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(beta @ self.B @ beta)


def penalty_matrix(basis: SplineBasis, A: float | None, lambda_R: float) -> PenaltyMatrix:
    if lambda_R < 0:
        raise ValueError("lambda_R must be nonnegative")
    if A is None or lambda_R == 0:
        return PenaltyMatrix(np.zeros((basis.M, basis.M)), float(A or 0.0), float(lambda_R))
    if A < 0:
        raise ValueError("A must be nonnegative")
    gram = _gram(basis, 1, A, 2 * A)
    s = basis.scale
    B = lambda_R * gram * np.outer(s, s)
    B = (B + B.T) / 2
    return PenaltyMatrix(B, float(A), float(lambda_R))


def zero_penalty(basis: SplineBasis) -> PenaltyMatrix:
    return PenaltyMatrix(np.zeros((basis.M, basis.M)), 0.0, 0.0)


def centered_basis(knots: Sequence[float], degree: int = 3, **kw) -> SplineBasis:
    return SplineBasis(knots=tuple(knots), degree=degree, layout="centered", **kw)
