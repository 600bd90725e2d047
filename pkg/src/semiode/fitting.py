"""Blockwise Levenberg-Marquardt followed by Newton-Raphson refinement."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import PenaltyMatrix, SplineBasis
from .errors import FitError, NumericError
from .model import (Dataset, Evaluation, FitConfig, Parameters, VarianceEstimates, alpha_of,
                    evaluate, loss, variance_estimates)

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "phase", "loss", "lambda1", "lambda2", "lambda3", "step_norm")


def _ev(ev, params, data, basis, config, need):
    if ev is not None and all(k in ev.d for k in need):
        return ev
    return evaluate(params, data, basis, config.h, need, config.sensitivities)


def _spd_solve(A, b):
    c = linalg.cho_factor(A, lower=True, check_finite=True)
    return linalg.cho_solve(c, b)


# Levenberg-Marquardt blocks ---------------------------------------------------

def lm_update_beta(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
                   penalty: PenaltyMatrix, lambda3: float, ev: Evaluation | None = None):
    """β* + δ with [JᵀJ + λ3 diag(JᵀJ) + B] δ = Jᵀε̃ − Bβ*.

    The scaling diagonal is floored at ``config.diag_floor`` times its
    largest entry, so a basis function the trajectories barely reach cannot
    take an unbounded step.  A failed Cholesky factorization is retried once
    with 10λ3.
    """
    ev = _ev(ev, params, data, basis, config, ("beta",))
    J = ev.d["beta"]
    JtJ = J.T @ J
    rhs = J.T @ ev.resid - penalty.B @ params.beta
    D = np.diag(JtJ)
    D = np.maximum(D, config.diag_floor * D.max())
    lam = lambda3
    for attempt in range(2):
        A = JtJ + lam * np.diag(D) + penalty.B
        try:
            return params.beta + _spd_solve(A, rhs)
        except (linalg.LinAlgError, ValueError):
            lam *= 10
            log.debug("singular damped beta system, retrying with lambda3=%g", lam)
    raise NumericError(f"damped normal equations for beta are singular (lambda3={lambda3:g})")


def lm_update_theta(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
                    lambda2: float, ev: Evaluation | None = None):
    """Per subject (JᵢᵀJᵢ + λ2) δᵢ = Jᵢᵀε̃ᵢ − λ2θᵢ*, then mean-centre."""
    ev = _ev(ev, params, data, basis, config, ("theta",))
    J = ev.d["theta"]
    subj = data.obs_subject
    jtj = np.bincount(subj, J * J, data.n)
    jte = np.bincount(subj, J * ev.resid, data.n)
    den = jtj + lambda2
    num = jte - lambda2 * params.theta
    step = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    theta = params.theta + step
    return theta - theta.mean()


def lm_update_a(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
                lambda1: float, ev: Evaluation | None = None):
    """Per curve (JᵀJ + λ1) δ = Jᵀε̃ + λ1(α* − a*); known initial conditions stay put."""
    est = ~data.a_fixed
    if not est.any():
        return params.a.copy()
    ev = _ev(ev, params, data, basis, config, ("a",))
    J = ev.d["a"]
    C = data.N_dot
    jtj = np.bincount(data.obs_curve, J * J, C)
    jte = np.bincount(data.obs_curve, J * ev.resid, C)
    alpha = alpha_of(params, config)
    den = jtj + lambda1
    num = jte + lambda1 * (alpha - params.a)
    step = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.where(est, params.a + step, params.a)


# Newton-Raphson blocks -------------------------------------------------------

@dataclass
class NRStep:
    value: np.ndarray
    gradient: np.ndarray
    curvature: np.ndarray
    newton: bool = True
    rejected: tuple = ()


def nr_update_theta(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
                    lambda2: float, ev: Evaluation | None = None) -> NRStep:
    """Exact per-subject Newton step (before centring).

    Subjects with nonpositive curvature keep their current θ and are listed
    in ``rejected``.
    """
    ev = _ev(ev, params, data, basis, config, ("theta", "tt"))
    s, hss, e = ev.d["theta"], ev.d["tt"], ev.resid
    subj = data.obs_subject
    grad = np.bincount(subj, -2 * e * s, data.n) + 2 * lambda2 * params.theta
    curv = np.bincount(subj, -2 * e * hss + 2 * s * s, data.n) + 2 * lambda2
    ok = curv > 0
    step = np.divide(grad, curv, out=np.zeros_like(grad), where=ok)
    return NRStep(params.theta - step, grad, curv, True, tuple(np.nonzero(~ok)[0].tolist()))


def beta_derivatives(ev: Evaluation, params: Parameters, penalty: PenaltyMatrix, second=True):
    """Gradient and Hessian of the loss in β (the Hessian includes 2B)."""
    J, e = ev.d["beta"], ev.resid
    grad = -2 * J.T @ e + 2 * penalty.B @ params.beta
    gn = 2 * J.T @ J + 2 * penalty.B
    if not second:
        return grad, gn, gn
    full = gn - 2 * np.einsum("m,mrs->rs", e, ev.d["bb"])
    return grad, (full + full.T) / 2, gn


def nr_update_beta(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
                   penalty: PenaltyMatrix, ev: Evaluation | None = None) -> NRStep:
    """β* − [Σ∂²ℓ/∂β∂βᵀ + 2B]⁻¹(Σ∂ℓ/∂β + 2Bβ*), Gauss-Newton if that matrix is not PD."""
    ev = _ev(ev, params, data, basis, config, ("beta", "bb"))
    grad, full, gn = beta_derivatives(ev, params, penalty)
    try:
        return NRStep(params.beta - _spd_solve(full, grad), grad, full, True)
    except (linalg.LinAlgError, ValueError):
        pass
    try:
        return NRStep(params.beta - _spd_solve(gn, grad), grad, gn, False)
    except (linalg.LinAlgError, ValueError):
        pass
    # rank-deficient (a basis function no data reach): minimum-norm GN step
    if not np.all(np.isfinite(gn)) or not np.all(np.isfinite(grad)):
        raise NumericError("Newton and Gauss-Newton matrices for beta are both singular")
    step, *_ = np.linalg.lstsq(gn, grad, rcond=None)
    return NRStep(params.beta - step, grad, gn, False)


def loss_gradient(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
                  penalty: PenaltyMatrix | None = None) -> dict:
    """Analytic ∂loss/∂(a, θ, β) assembled from first-order sensitivities."""
    penalty = config.penalty(basis) if penalty is None else penalty
    ev = evaluate(params, data, basis, config.h, ("a", "theta", "beta"), config.sensitivities)
    e = ev.resid
    est = ~data.a_fixed
    alpha = alpha_of(params, config)
    ga = np.bincount(data.obs_curve, -2 * e * ev.d["a"], data.N_dot)
    if config.alpha is None:
        # d/da_l Σ_k (a_k − ā)² = 2(a_l − ā), the mean term cancels
        pen_a = 2 * config.lambda1 * np.where(est, params.a - alpha, 0.0)
        if not est.all():
            pen_a -= 2 * config.lambda1 * np.sum(np.where(est, params.a - alpha, 0)) / data.N_dot
    else:
        pen_a = 2 * config.lambda1 * np.where(est, params.a - alpha, 0.0)
    gt = np.bincount(data.obs_subject, -2 * e * ev.d["theta"], data.n) \
        + 2 * config.lambda2 * params.theta
    gb = -2 * ev.d["beta"].T @ e + 2 * penalty.B @ params.beta
    return {"a": ga + pen_a, "theta": gt, "beta": gb}


# driver ------------------------------------------------------------------------

@dataclass
class FitResult:
    params: Parameters
    trace: list
    converged: dict
    iters: dict
    lambda1: float
    lambda2: float
    loss: float
    variances: VarianceEstimates | None = None
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.converged.get("lm") and self.converged.get("nr"))

    def write_trace(self, path):
        write_trace(self.trace, path)


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow(row)


class _Objective:
    """Loss at fixed (λ1, λ2), with the residual vector of the last call kept."""

    def __init__(self, data, basis, config, penalty):
        self.data, self.basis, self.config, self.penalty = data, basis, config, penalty

    def __call__(self, params, lam1, lam2):
        cfg = self.config.with_(lambda1=lam1, lambda2=lam2)
        ev = evaluate(params, self.data, self.basis, cfg.h)
        self.resid = ev.resid
        return loss(params, self.data, self.basis, cfg, self.penalty, ev.resid)


def _halve(objective, params, block, target, base, lam1, lam2, max_halvings=10):
    """Step from params.<block> toward ``target``; halve while the loss rises."""
    start = getattr(params, block)
    step = target - start
    for k in range(max_halvings + 1):
        trial = params.copy()
        setattr(trial, block, start + step / 2 ** k)
        try:
            val = objective(trial, lam1, lam2)
        except NumericError:
            continue
        if val <= base:
            return trial, val, k
    return params, base, None


def _lm_beta_step(objective, params, penalty, lam3, lam1, lam2):
    """LM β-step; if it raises the loss, retry with 10× damping (bounded).

    Returns the new parameters and the λ3 actually used (None when every
    retry failed and β was left unchanged).
    """
    cfg = objective.config
    ev = evaluate(params, objective.data, objective.basis, cfg.h, ("beta",), cfg.sensitivities)
    base = loss(params, objective.data, objective.basis, cfg.with_(lambda1=lam1, lambda2=lam2),
                penalty, ev.resid)
    lam = lam3
    tries = cfg.max_damping_boosts + 1 if cfg.lm_safeguard else 1
    for _ in range(tries):
        trial = params.copy()
        trial.beta = lm_update_beta(params, objective.data, objective.basis, cfg, penalty, lam, ev)
        try:
            val = objective(trial, lam1, lam2)
        except NumericError:
            val = np.inf
        if val <= base or not cfg.lm_safeguard:
            return trial, lam
        lam *= 10
    return params, None


def fit(data: Dataset, basis: SplineBasis, config: FitConfig | None = None,
        init: Parameters | None = None, penalty: PenaltyMatrix | None = None) -> FitResult:
    """Two-phase fit: LM cycles (β, θ, a), then NR cycles.

    λ3 follows λ3⁰/j.  λ1, λ2 are re-estimated after each cycle in a phase
    flagged adaptive.  The loop stops a phase when ‖Δβ‖ falls below its
    tolerance.
    """
    config = FitConfig() if config is None else config
    penalty = config.penalty(basis) if penalty is None else penalty
    params = Parameters.initial(data, basis.M) if init is None else init.copy()
    if params.beta.shape != (basis.M,) or params.theta.shape != (data.n,) \
            or params.a.shape != (data.N_dot,):
        raise FitError("initial parameters do not match the data and basis dimensions")
    if data.a_known is not None:
        params.a[data.a_fixed] = data.a_known[data.a_fixed]
    estimate_a = bool((~data.a_fixed).any())
    lam1 = config.lambda1 if estimate_a else 0.0
    lam2 = config.lambda2
    objective = _Objective(data, basis, config, penalty)
    trace: list = []
    notes: list = []
    converged = {"lm": False, "nr": False}
    iters = {"lm": 0, "nr": 0}
    variances = None

    def fail(msg):
        raise FitError(msg, trace)

    try:
        current = objective(params, lam1, lam2)
    except NumericError as exc:
        raise FitError(f"initial trajectories are not solvable: {exc}", trace) from exc

    def refresh(adaptive):
        nonlocal lam1, lam2, variances
        try:
            variances = variance_estimates(params, data, objective.resid, basis.M,
                                           alpha_of(params, config))
        except Exception as exc:  # too few degrees of freedom for the estimates
            notes.append(f"variance estimates unavailable: {exc}")
            return
        if adaptive:
            new1, new2 = variances.lambdas((lam1, lam2))
            lam1 = new1 if estimate_a else 0.0
            lam2 = new2

    def log_row(j, phase, lam3, step):
        trace.append({"iteration": j, "phase": phase, "loss": current, "lambda1": lam1,
                      "lambda2": lam2, "lambda3": lam3, "step_norm": step})

    rises = 0
    blocks = config.update_order
    # phase 1 ----------------------------------------------------------------
    for j in range(1, config.max_lm_iters + 1):
        lam3 = config.lambda3_0 / j
        start_beta = params.beta.copy()
        before = current
        try:
            for blk in blocks:
                if blk == "beta":
                    params, lam3_used = _lm_beta_step(objective, params, penalty, lam3,
                                                      lam1, lam2)
                    if lam3_used is None:
                        notes.append(f"LM cycle {j}: no damping reduced the loss, beta kept")
                    elif lam3_used != lam3:
                        lam3 = lam3_used
                elif blk == "theta":
                    params.theta = lm_update_theta(params, data, basis, config, lam2)
                elif estimate_a:
                    cfg = config if lam1 == config.lambda1 else config.with_(lambda1=lam1)
                    params.a = lm_update_a(params, data, basis, cfg, lam1)
            current = objective(params, lam1, lam2)
        except NumericError as exc:
            raise FitError(f"LM cycle {j} failed: {exc}", trace) from exc
        step = float(np.linalg.norm(params.beta - start_beta))
        iters["lm"] = j
        log_row(j, "lm", lam3, step)
        rises = rises + 1 if current > before else 0
        if rises >= config.divergence_window:
            fail(f"loss increased in {rises} consecutive LM cycles")
        refresh(config.adaptive_lm)
        if config.adaptive_lm:
            current = objective(params, lam1, lam2)
        if step < config.lm_tol:
            converged["lm"] = True
            break

    # phase 2 ----------------------------------------------------------------
    lm_loss = current
    for j in range(1, config.max_nr_iters + 1):
        start_beta = params.beta.copy()
        try:
            for blk in blocks:
                cfg = config.with_(lambda1=lam1, lambda2=lam2)
                if blk == "beta":
                    nr = nr_update_beta(params, data, basis, cfg, penalty)
                    if not nr.newton:
                        notes.append(f"NR cycle {j}: Gauss-Newton fallback for beta")
                    params, current, k = _halve(objective, params, "beta", nr.value,
                                                current, lam1, lam2)
                elif blk == "theta":
                    nr = nr_update_theta(params, data, basis, cfg, lam2)
                    if nr.rejected:
                        notes.append(f"NR cycle {j}: nonpositive curvature for subjects "
                                     f"{list(nr.rejected)}")
                    params, current, k = _halve(objective, params, "theta",
                                                nr.value, current, lam1, lam2)
                    params.theta = params.theta - params.theta.mean()
                    current = objective(params, lam1, lam2)
                elif estimate_a:
                    target = lm_update_a(params, data, basis, cfg, lam1)
                    params, current, k = _halve(objective, params, "a", target,
                                                current, lam1, lam2)
        except NumericError as exc:
            raise FitError(f"NR cycle {j} failed: {exc}", trace) from exc
        step = float(np.linalg.norm(params.beta - start_beta))
        iters["nr"] = j
        log_row(j, "nr", 0.0, step)
        refresh(config.adaptive_nr)
        if config.adaptive_nr:
            current = objective(params, lam1, lam2)
        if step < config.nr_tol:
            converged["nr"] = True
            break
    if config.max_nr_iters == 0:
        converged["nr"] = True
    if not config.adaptive_nr and current > lm_loss * (1 + 1e-12):
        notes.append("NR phase ended above its starting loss")
    if variances is None:
        refresh(False)
    return FitResult(params=params, trace=trace, converged=converged, iters=iters,
                     lambda1=lam1, lambda2=lam2, loss=current, variances=variances,
                     notes=notes)
