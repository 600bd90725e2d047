"""Model selection: leave-one-curve-out CV (approximate and exact), the
stepwise-regression initializer and the grid search over candidate bases."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import SplineBasis
from .errors import DataError, FitError, NumericError
from .fitting import FitResult, fit
from .model import Dataset, FitConfig, Parameters, evaluate
from .ode import VectorField, solve_bundle

log = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5) - 1) / 2


class SelectionError(NumericError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def golden_section(f, lo, hi, tol=1e-8, max_iter=200):
    """Vectorised golden-section minimisation of f over per-element brackets [lo, hi].

    ``f`` maps an array of candidate points to an array of values.
    """
    a = np.asarray(lo, dtype=float).copy()
    b = np.asarray(hi, dtype=float).copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol):
            break
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        # one of the two interior points carries over
        c_keep, d_keep = np.where(left, new_c, d), np.where(left, c, new_d)
        fc_keep, fd_keep = np.where(left, np.nan, fd), np.where(left, fc, np.nan)
        probe = np.where(left, c_keep, d_keep)
        fp = f(probe)
        c, d = c_keep, d_keep
        fc = np.where(left, fp, fc_keep)
        fd = np.where(left, fd_keep, fp)
    x = (a + b) / 2
    return x, f(x)


def _curve_sums(data: Dataset, v):
    """Σ_j over each curve of a per-observation array (any trailing shape)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((data.N_dot,) + v.shape[1:])
    np.add.at(out, data.obs_curve, v)
    return out


def _predict_loss(data: Dataset, basis: SplineBasis, a, theta_c, beta_c, h):
    """Per-curve Σ_j (Y − X̃(t; a, θ, β))² with per-curve θ and β."""
    fld = VectorField(basis, beta_c, theta_c)
    bundle = solve_bundle(fld, a, h)
    x = bundle.at_times(data.obs_curve, data.times, ["x"])["x"]
    return _curve_sums(data, (data.values - x) ** 2)


@dataclass
class CvDetails:
    score: float
    per_curve: np.ndarray
    a: np.ndarray
    theta: np.ndarray
    beta: np.ndarray


def approx_cv(result: FitResult, data: Dataset, basis: SplineBasis, config: FitConfig,
              penalty=None, details: bool = False, hessian: str = "full"):
    """Approximate leave-one-curve-out CV score from one full-data fit.

    θ̃ and β̃ for each dropped curve are one-step corrections of the full-data
    estimates (plus 2λ2 and 2B in the curvature); ã is re-optimised by
    golden-section search.  ``hessian='full'`` sums the curvature over all
    data; ``'leave_out'`` first removes the dropped curve's own share, which
    is the Newton step from the full-data estimate for the reduced problem.
    """
    if hessian not in ("full", "leave_out"):
        raise ValueError("hessian must be 'full' or 'leave_out'")
    penalty = config.penalty(basis) if penalty is None else penalty
    p = result.params
    lam1, lam2 = result.lambda1, result.lambda2
    ev = evaluate(p, data, basis, config.h, ("theta", "beta", "tt", "bb"), config.sensitivities)
    e, st, htt, sb, hbb = ev.resid, ev.d["theta"], ev.d["tt"], ev.d["beta"], ev.d["bb"]

    h_t = -2 * e * htt + 2 * st * st
    H_t = (np.bincount(data.obs_subject, h_t, data.n) + 2 * lam2)[data.curve_subject]
    if hessian == "leave_out":
        H_t = H_t - _curve_sums(data, h_t)
    if np.any(H_t <= 0):
        raise NumericError("corrected theta curvature is not positive")
    g_t = _curve_sums(data, -2 * e * st)
    theta_c = p.theta[data.curve_subject] + g_t / H_t

    h_b = 2 * sb[:, :, None] * sb[:, None, :] - 2 * e[:, None, None] * hbb
    H_b = h_b.sum(0) + 2 * penalty.B
    g_b = _curve_sums(data, -2 * e[:, None] * sb)
    if hessian == "full":
        H_b = np.broadcast_to((H_b + H_b.T) / 2, (data.N_dot,) + H_b.shape)
    else:
        H_b = H_b[None] - _curve_sums(data, h_b)
        H_b = (H_b + np.swapaxes(H_b, 1, 2)) / 2
    beta_c = np.empty((data.N_dot, basis.M))
    for c in range(data.N_dot):
        try:
            chol = linalg.cho_factor(H_b[c], lower=True)
        except linalg.LinAlgError as exc:
            if hessian == "full":
                raise NumericError("corrected beta Hessian is not positive definite") from exc
            # the dropped curve was the only one reaching some basis function
            beta_c[c] = p.beta + np.linalg.lstsq(H_b[c], g_b[c], rcond=None)[0]
            continue
        beta_c[c] = p.beta + linalg.cho_solve(chol, g_b[c])

    a_c = p.a.copy()
    est = ~data.a_fixed
    if est.any():
        alpha = float(np.mean(p.a)) if config.alpha is None else float(config.alpha)
        s_a = np.sqrt(result.variances.sigma_a2) if result.variances is not None else 0.0
        if not s_a > 0:
            s_a = 0.1 * float(np.mean(np.abs(p.a))) + 1e-3
        width = 3 * s_a

        def obj(a):
            a_full = np.where(est, a, p.a)
            return _predict_loss(data, basis, a_full, theta_c, beta_c, config.h) \
                + lam1 * (a - alpha) ** 2

        a_opt, _ = golden_section(obj, p.a - width, p.a + width, tol=1e-8)
        a_c = np.where(est, a_opt, p.a)
    per_curve = _predict_loss(data, basis, a_c, theta_c, beta_c, config.h)
    score = float(per_curve.sum())
    if details:
        return CvDetails(score, per_curve, a_c, theta_c, beta_c)
    return score


def _drop_init(full: Parameters, data: Dataset, drop: int):
    keep_curves = np.setdiff1d(np.arange(data.N_dot), [drop])
    keep_subj = np.unique(data.curve_subject[keep_curves])
    theta = full.theta[keep_subj]
    return Parameters(full.a[keep_curves], theta - theta.mean(), full.beta)


def exact_cv(data: Dataset, basis: SplineBasis, config: FitConfig, penalty=None,
             full: FitResult | None = None, details: bool = False):
    """Brute-force leave-one-curve-out CV: one refit per curve (small problems only)."""
    if data.N_dot < 2:
        raise DataError("exact CV needs at least two curves")
    penalty = config.penalty(basis) if penalty is None else penalty
    if full is None:
        full = fit(data, basis, config, penalty=penalty)
    per_curve = np.zeros(data.N_dot)
    for c in range(data.N_dot):
        keep = [k for k in range(data.N_dot) if k != c]
        sub = data.subset_curves(keep)
        try:
            r = fit(sub, basis, config, init=_drop_init(full.params, data, c), penalty=penalty)
        except FitError as exc:
            raise FitError(f"refit without curve {data.curve_ids[c]!r} failed: {exc}",
                           exc.trace) from exc
        subj = data.subject_ids[data.curve_subject[c]]
        theta = r.params.theta[sub.subject_ids.index(subj)] if subj in sub.subject_ids else 0.0
        one = data.subset_curves([c])
        if one.a_fixed[0]:
            a = one.a_known[:1]
        else:
            alpha = float(np.mean(r.params.a)) if config.alpha is None else float(config.alpha)
            s_a = np.sqrt(r.variances.sigma_a2) if r.variances is not None else 0.0
            if not s_a > 0:
                s_a = 0.1 * abs(full.params.a[c]) + 1e-3
            centre = full.params.a[c:c + 1]

            def obj(a):
                return _predict_loss(one, basis, a, np.array([theta]), r.params.beta,
                                     config.h) + r.lambda1 * (a - alpha) ** 2

            a, _ = golden_section(obj, centre - 3 * s_a, centre + 3 * s_a)
        per_curve[c] = _predict_loss(one, basis, a, np.array([theta]), r.params.beta,
                                     config.h)[0]
    score = float(per_curve.sum())
    return (score, per_curve) if details else score


# empirical derivatives and the stepwise initializer -----------------------------

def empirical_derivatives(data: Dataset):
    """Midpoints X̂ and divided differences X̂' for consecutive observations.

    Returns arrays (x_hat, dx_hat, curve, dt) with one entry per pair.
    """
    same = data.obs_curve[1:] == data.obs_curve[:-1]
    dt = np.diff(data.times)
    if np.any(dt[same] == 0):
        raise DataError("duplicate observation times within a curve")
    idx = np.nonzero(same)[0]
    y0, y1 = data.values[idx], data.values[idx + 1]
    dts = dt[idx]
    return (y0 + y1) / 2, (y1 - y0) / dts, data.obs_curve[idx], dts


def truncated_power_design(x, knots, terms):
    """Columns for the named terms: 'x2', 'x3' or a knot index k for (x − κ_k)³₊."""
    x = np.asarray(x, dtype=float)
    cols = []
    for t in terms:
        if t == "x2":
            cols.append(x ** 2)
        elif t == "x3":
            cols.append(x ** 3)
        else:
            cols.append(np.maximum(x - knots[t], 0.0) ** 3)
    return np.column_stack(cols) if cols else np.zeros((x.size, 0))


def _ic(rss, n, k, criterion):
    rss = max(rss, 1e-300)
    pen = 2.0 if criterion == "AIC" else np.log(n)
    return n * np.log(rss / n) + pen * k


def _lstsq(X, y):
    if X.shape[1] == 0:
        return np.zeros(0), float(y @ y)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    return coef, float(r @ r)


@dataclass
class StepwiseResult:
    terms: list
    coef: np.ndarray
    knots: np.ndarray
    selected_knots: np.ndarray
    beta0: np.ndarray | None
    theta0: np.ndarray
    sigma_eps: float
    sigma_theta: float
    criterion: str
    ridge: bool = False

    def g(self, x):
        return truncated_power_design(x, self.knots, self.terms) @ self.coef


def stepwise_init(data: Dataset, candidate_knots, criterion: str = "AIC", theta0=None,
                  basis: SplineBasis | None = None, direction: str = "both",
                  ridge: float = 1e-6) -> StepwiseResult:
    """Stepwise regression of e^{−θ̂}X̂' on {x², x³, (x − κ)³₊} evaluated at X̂.

    ``direction='forward'`` only adds terms; ``'both'`` also tries removing
    a term after each addition.  With ``basis`` given, the selected function
    is projected onto it to give an initial β.
    """
    if criterion not in ("AIC", "BIC"):
        raise ValueError("criterion must be 'AIC' or 'BIC'")
    if direction not in ("forward", "both"):
        raise ValueError("direction must be 'forward' or 'both'")
    knots = np.asarray(sorted(candidate_knots), dtype=float)
    xh, dxh, curve, dt = empirical_derivatives(data)
    th = np.zeros(data.n) if theta0 is None else np.asarray(theta0, dtype=float)
    pair_subject = data.curve_subject[curve]
    y = np.exp(-th[pair_subject]) * dxh
    n = y.size
    pool = ["x2", "x3", *range(knots.size)]
    terms: list = []
    _, rss = _lstsq(np.zeros((n, 0)), y)
    best = _ic(rss, n, 0, criterion)
    # once the fit is exact the criterion only sees rounding noise
    exact = 1e-24 * max(float(y @ y), 1e-300) + 1e-300
    if rss <= 1e-24 * max(n, 1):
        pool = []
    changed = True
    while changed and rss > exact:
        changed = False
        cand = [t for t in pool if t not in terms]
        if cand and len(terms) + 1 < n:
            scores = []
            for t in cand:
                _, r = _lstsq(truncated_power_design(xh, knots, terms + [t]), y)
                scores.append(_ic(r, n, len(terms) + 1, criterion))
            k = int(np.argmin(scores))
            if scores[k] < best - 1e-10:
                terms.append(cand[k])
                best = scores[k]
                rss = _lstsq(truncated_power_design(xh, knots, terms), y)[1]
                changed = True
        if direction == "both" and len(terms) > 1:
            scores = []
            for t in terms:
                rest = [u for u in terms if u != t]
                _, r = _lstsq(truncated_power_design(xh, knots, rest), y)
                scores.append(_ic(r, n, len(rest), criterion))
            k = int(np.argmin(scores))
            if scores[k] < best - 1e-10:
                best = scores[k]
                terms.pop(k)
                rss = _lstsq(truncated_power_design(xh, knots, terms), y)[1]
                changed = True
    X = truncated_power_design(xh, knots, terms)
    used_ridge = False
    if X.shape[1] >= n:
        used_ridge = True
        terms = list(pool)
        X = truncated_power_design(xh, knots, terms)
        coef = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]) * max(1.0, np.trace(X.T @ X)),
                               X.T @ y)
    else:
        coef, _ = _lstsq(X, y)
    fitted = X @ coef
    resid = y - fitted
    # divided differences carry noise of variance 2σ²/Δt², which gives σ_ε
    dof = max(n - len(terms), 1)
    sigma_eps = float(np.sqrt(np.sum((resid * dt) ** 2) / (2 * dof)))
    # per-subject log ratio of raw slopes to the common fit gives θ
    g_at = fitted
    theta_hat = np.zeros(data.n)
    for i in range(data.n):
        sel = (pair_subject == i) & (np.abs(g_at) > 1e-12)
        if sel.sum() > 0:
            num = float(np.sum(dxh[sel] * g_at[sel]))
            den = float(np.sum(g_at[sel] ** 2))
            if num > 0 and den > 0:
                theta_hat[i] = np.log(num / den)
    theta_hat -= theta_hat.mean()
    sigma_theta = float(np.sqrt(np.sum(theta_hat ** 2) / max(data.n - 1, 1)))
    beta0 = None
    if basis is not None:
        lo, hi = float(xh.min()), float(xh.max())
        grid = np.linspace(lo, hi, 400)
        D = basis.design(grid)
        target = truncated_power_design(grid, knots, terms) @ coef if terms else np.zeros(grid.size)
        beta0, *_ = np.linalg.lstsq(D, target, rcond=None)
    sel_knots = np.array(sorted(knots[t] for t in terms if not isinstance(t, str)))
    return StepwiseResult(terms=terms, coef=coef, knots=knots, selected_knots=sel_knots,
                          beta0=beta0, theta0=th if theta0 is not None else theta_hat,
                          sigma_eps=sigma_eps, sigma_theta=sigma_theta, criterion=criterion,
                          ridge=used_ridge)


# grid search ---------------------------------------------------------------------

@dataclass
class ModelSpec:
    model_id: str
    basis: SplineBasis
    A: float | None = None
    lambda_R: float = 0.0

    def to_dict(self):
        return {"model_id": self.model_id, "basis": self.basis.to_dict(), "A": self.A,
                "lambda_R": self.lambda_R}

    @classmethod
    def from_dict(cls, spec):
        return cls(str(spec["model_id"]), SplineBasis.from_dict(spec["basis"]),
                   spec.get("A"), float(spec.get("lambda_R", 0.0)))


def knot_grid(Ms, offset=0.1, span=1.0, degree=3, layout="centered", domain=None):
    """Candidates with knots offset + span·(1:M)/M for each M (the simulation grid)."""
    out = []
    for M in Ms:
        knots = tuple(offset + span * np.arange(1, M + 1) / M)
        basis = SplineBasis(knots=knots, degree=degree, layout=layout,
                            domain=None if layout == "centered" else domain)
        out.append(ModelSpec(f"M{M}", basis))
    return out


CV_COLUMNS = ("model_id", "M", "knots", "A", "lambda_R", "lm_iters", "nr_iters", "cv_score",
              "converged", "selected", "seconds", "error")


@dataclass
class CvReport:
    rows: list
    fits: dict = field(default_factory=dict)
    selected: ModelSpec | None = None

    @property
    def selected_id(self):
        return None if self.selected is None else self.selected.model_id

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CV_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "knots": " ".join(f"{k:.6g}" for k in r["knots"]),
                            "selected": r["model_id"] == self.selected_id})


def model_search(data: Dataset, model_grid, config: FitConfig, init=None,
                 raise_if_none: bool = True, compute_cv: bool = True) -> CvReport:
    """Fit each candidate and select the converged one with the smallest approximate CV.

    Ties go to the earlier candidate in grid order.  ``init`` may map model
    ids to starting parameters.
    """
    if not model_grid:
        raise ValueError("model grid is empty")
    rows, fits = [], {}
    for spec in model_grid:
        t0 = time.perf_counter()
        cfg = config.with_(A=spec.A, lambda_R=spec.lambda_R)
        row = {"model_id": spec.model_id, "M": spec.basis.M, "knots": spec.basis.knots,
               "A": spec.A, "lambda_R": spec.lambda_R, "lm_iters": None, "nr_iters": None,
               "cv_score": float("nan"), "converged": False, "error": ""}
        try:
            start = init.get(spec.model_id) if isinstance(init, dict) else None
            r = fit(data, spec.basis, cfg, init=start)
            fits[spec.model_id] = r
            row.update(lm_iters=r.iters["lm"], nr_iters=r.iters["nr"], converged=r.ok)
            if compute_cv:
                row["cv_score"] = approx_cv(r, data, spec.basis, cfg)
        except NumericError as exc:
            row["converged"] = False
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.info("candidate %s failed: %s", spec.model_id, exc)
        row["seconds"] = round(time.perf_counter() - t0, 3)
        rows.append(row)
    report = CvReport(rows=rows, fits=fits)
    ok = [i for i, r in enumerate(rows) if r["converged"] and np.isfinite(r["cv_score"])]
    if not compute_cv:
        ok = [i for i, r in enumerate(rows) if r["converged"]]
    if ok:
        best = min(ok, key=lambda i: (rows[i]["cv_score"] if compute_cv else 0.0, i))
        report.selected = model_grid[best]
    elif raise_if_none:
        raise SelectionError("no candidate model converged", report)
    return report
