"""Data containers, the penalized loss and the variance estimators.

Observations are stored flat (one row per measurement) and sorted by curve
then time.  ``obs_curve`` maps each row to its curve and ``curve_subject``
maps each curve to its subject, so per-curve and per-subject sums are
``np.bincount`` calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .basis import PenaltyMatrix, SplineBasis, penalty_matrix
from .errors import ConfigError, DataError, PreconditionError
from .ode import VectorField, closed_form_paths, propagate_sensitivities, solve_bundle


@dataclass(frozen=True)
class Dataset:
    subject_ids: tuple
    curve_ids: tuple
    curve_subject: np.ndarray
    obs_curve: np.ndarray
    times: np.ndarray
    values: np.ndarray
    a_known: np.ndarray | None = None
    time_window: tuple = (0.0, 1.0)
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        cs = np.asarray(self.curve_subject, dtype=int)
        oc = np.asarray(self.obs_curve, dtype=int)
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "curve_ids", tuple(self.curve_ids))
        object.__setattr__(self, "curve_subject", cs)
        object.__setattr__(self, "obs_curve", oc)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        if self.a_known is not None:
            ak = np.asarray(self.a_known, dtype=float)
            if ak.shape != (cs.size,):
                raise DataError("a_known must have one entry per curve")
            if np.all(np.isnan(ak)):
                ak = None
            object.__setattr__(self, "a_known", ak)
        object.__setattr__(self, "time_window", tuple(float(v) for v in self.time_window))
        self.validate()

    def validate(self):
        n_curves = self.curve_subject.size
        if self.times.size == 0:
            raise DataError("no observations")
        if not (self.obs_curve.shape == self.times.shape == self.values.shape):
            raise DataError("obs_curve, times and values must have equal length")
        if len(self.curve_ids) != n_curves:
            raise DataError("curve_ids and curve_subject disagree in length")
        if n_curves == 0 or self.curve_subject.min() < 0 or \
                self.curve_subject.max() >= len(self.subject_ids):
            raise DataError("curve_subject refers to an unknown subject")
        if self.obs_curve.min() < 0 or self.obs_curve.max() >= n_curves:
            raise DataError("obs_curve refers to an unknown curve")
        if np.any(np.diff(self.obs_curve) < 0):
            raise DataError("observations must be grouped by curve")
        if np.any(self.m_il < 1):
            bad = int(np.argmin(self.m_il))
            raise DataError(f"curve {self.curve_ids[bad]!r} has no observations")
        if np.any(np.bincount(self.curve_subject, minlength=self.n) < 1):
            raise DataError("every subject needs at least one curve")
        if np.any(~np.isfinite(self.times)) or np.any(~np.isfinite(self.values)):
            raise DataError("non-finite time or value")
        if np.any(self.times < 0) or np.any(self.times > 1):
            raise DataError("rescaled times must lie in [0, 1]")
        same = self.obs_curve[1:] == self.obs_curve[:-1]
        if np.any(np.diff(self.times)[same] <= 0):
            raise DataError("times must be strictly increasing within each curve")

    # sizes ---------------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def N_dot(self) -> int:
        return int(self.curve_subject.size)

    @property
    def m_dotdot(self) -> int:
        return int(self.times.size)

    @property
    def m_il(self) -> np.ndarray:
        return np.bincount(self.obs_curve, minlength=self.curve_subject.size)

    @property
    def m_i(self) -> np.ndarray:
        """Σ_l m_il per subject."""
        return np.bincount(self.curve_subject, weights=self.m_il, minlength=self.n)

    @property
    def obs_subject(self) -> np.ndarray:
        return self.curve_subject[self.obs_curve]

    @property
    def a_fixed(self) -> np.ndarray:
        """Curves whose initial condition is known (and never updated)."""
        if self.a_known is None:
            return np.zeros(self.N_dot, dtype=bool)
        return ~np.isnan(self.a_known)

    @property
    def first_values(self) -> np.ndarray:
        starts = np.searchsorted(self.obs_curve, np.arange(self.N_dot))
        return self.values[starts]

    def curve_rows(self, c: int) -> slice:
        lo, hi = np.searchsorted(self.obs_curve, [c, c + 1])
        return slice(int(lo), int(hi))

    # construction ------------------------------------------------------------
    @classmethod
    def from_records(cls, subject, curve, time, value, a_known=None,
                     time_window=None, units=None) -> "Dataset":
        """Build from per-observation columns; times must already lie in [0, 1].

        ``a_known`` is per observation (constant within a curve, NaN when
        unknown).  Subject and curve order follow first appearance.
        """
        subject = [str(s) for s in subject]
        curve = [str(c) for c in curve]
        time = np.asarray(time, dtype=float)
        value = np.asarray(value, dtype=float)
        if not (len(subject) == len(curve) == time.size == value.size):
            raise DataError("columns have different lengths")
        if time.size == 0:
            raise DataError("no observations")
        subj_ids = list(dict.fromkeys(subject))
        keys = list(dict.fromkeys(zip(subject, curve)))
        key_idx = {k: i for i, k in enumerate(keys)}
        oc = np.array([key_idx[k] for k in zip(subject, curve)])
        order = np.lexsort((time, oc))
        cs = np.array([subj_ids.index(s) for s, _ in keys])
        ak = None
        if a_known is not None:
            a_obs = np.asarray(a_known, dtype=float)
            ak = np.full(len(keys), np.nan)
            for c in range(len(keys)):
                vals = a_obs[oc == c]
                vals = vals[~np.isnan(vals)]
                if vals.size:
                    if np.ptp(vals) > 0:
                        raise DataError(f"a_known varies within curve {keys[c]}")
                    ak[c] = vals[0]
        return cls(
            subject_ids=tuple(subj_ids),
            curve_ids=tuple(c for _, c in keys),
            curve_subject=cs,
            obs_curve=oc[order],
            times=time[order],
            values=value[order],
            a_known=ak,
            time_window=tuple(time_window) if time_window is not None else (0.0, 1.0),
            units=dict(units or {}),
        )

    def subset_curves(self, keep: Sequence[int]) -> "Dataset":
        """Dataset restricted to the given curves (subjects without curves are dropped)."""
        keep = np.asarray(sorted(keep), dtype=int)
        subj_keep = np.unique(self.curve_subject[keep])
        subj_map = {s: i for i, s in enumerate(subj_keep)}
        rows = np.concatenate([np.arange(self.curve_rows(c).start, self.curve_rows(c).stop)
                               for c in keep])
        cmap = {c: i for i, c in enumerate(keep)}
        return Dataset(
            subject_ids=tuple(self.subject_ids[s] for s in subj_keep),
            curve_ids=tuple(self.curve_ids[c] for c in keep),
            curve_subject=np.array([subj_map[s] for s in self.curve_subject[keep]]),
            obs_curve=np.array([cmap[c] for c in self.obs_curve[rows]]),
            times=self.times[rows],
            values=self.values[rows],
            a_known=None if self.a_known is None else self.a_known[keep],
            time_window=self.time_window,
            units=self.units,
        )

    def equals(self, other: "Dataset", atol=0.0) -> bool:
        if (self.subject_ids, self.curve_ids) != (other.subject_ids, other.curve_ids):
            return False
        if not np.array_equal(self.curve_subject, other.curve_subject):
            return False
        if not np.array_equal(self.obs_curve, other.obs_curve):
            return False
        if not (np.allclose(self.times, other.times, atol=atol, rtol=0)
                and np.allclose(self.values, other.values, atol=atol, rtol=0)):
            return False
        if (self.a_known is None) != (other.a_known is None):
            return False
        if self.a_known is not None and not np.allclose(
                self.a_known, other.a_known, atol=atol, rtol=0, equal_nan=True):
            return False
        return np.allclose(self.time_window, other.time_window, atol=atol, rtol=0)


@dataclass
class Parameters:
    a: np.ndarray
    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.a = np.array(self.a, dtype=float)
        self.theta = np.array(self.theta, dtype=float)
        self.beta = np.array(self.beta, dtype=float)

    def copy(self) -> "Parameters":
        return Parameters(self.a.copy(), self.theta.copy(), self.beta.copy())

    def centered(self) -> "Parameters":
        return Parameters(self.a.copy(), self.theta - self.theta.mean(), self.beta.copy())

    def identified(self) -> "Parameters":
        """Same trajectories with mean-zero θ: the mean scale moves into β."""
        tbar = float(self.theta.mean())
        return Parameters(self.a.copy(), self.theta - tbar, self.beta * np.exp(tbar))

    @classmethod
    def initial(cls, data: Dataset, M: int, beta=None, theta=None) -> "Parameters":
        """a from the first observation of each curve (or the known value), θ = 0, β = 1."""
        a = data.first_values.copy()
        if data.a_known is not None:
            a[data.a_fixed] = data.a_known[data.a_fixed]
        th = np.zeros(data.n) if theta is None else np.asarray(theta, dtype=float)
        b = np.ones(M) if beta is None else np.asarray(beta, dtype=float)
        return cls(a, th, b)


@dataclass
class FitConfig:
    """Penalties, grid and stopping rules for one fit.

    ``alpha`` is the shrinkage target of the initial conditions: None means
    the running mean of the current a (the default), a number fixes it.
    """

    lambda1: float = 0.04
    lambda2: float = 0.01
    lambda3_0: float = 1.0
    A: float | None = None
    lambda_R: float = 0.0
    alpha: float | None = None
    adaptive_lm: bool = False
    adaptive_nr: bool = True
    h: float = 1.0 / 256
    lm_tol: float = 5e-3
    nr_tol: float = 1e-3
    max_lm_iters: int = 100
    max_nr_iters: int = 30
    update_order: tuple = ("beta", "theta", "a")
    sensitivities: str = "propagate"
    divergence_window: int = 5
    lm_safeguard: bool = True
    max_damping_boosts: int = 8
    diag_floor: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda1", "lambda2", "lambda3_0", "lambda_R"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative number, got {v!r}")
        for name in ("lm_tol", "nr_tol", "h"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_lm_iters < 0 or self.max_nr_iters < 0:
            raise ConfigError("iteration limits must be nonnegative")
        if self.A is not None and self.A < 0:
            raise ConfigError("A must be nonnegative")
        n = round(1 / self.h)
        if abs(n * self.h - 1) > 1e-9 or n % 4:
            raise ConfigError("1/h must be an integer multiple of 4")
        if sorted(self.update_order) != ["a", "beta", "theta"]:
            raise ConfigError("update_order must be a permutation of (beta, theta, a)")
        if self.sensitivities not in ("propagate", "closed", "auto"):
            raise ConfigError("sensitivities must be 'propagate', 'closed' or 'auto'")

    def penalty(self, basis: SplineBasis) -> PenaltyMatrix:
        return penalty_matrix(basis, self.A, self.lambda_R)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["update_order"] = list(self.update_order)
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        extra = set(spec) - known
        if extra:
            raise ConfigError(f"unknown fit options: {sorted(extra)}")
        spec = dict(spec)
        if "update_order" in spec:
            spec["update_order"] = tuple(spec["update_order"])
        try:
            return cls(**spec)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **kw) -> "FitConfig":
        return replace(self, **kw)


# model evaluation --------------------------------------------------------

_PATHS = {
    "a": "sens_a", "theta": "sens_theta", "beta": "sens_beta",
    "aa": "hess_a_a", "tt": "hess_theta_theta", "bb": "hess_beta_beta", "tb": "hess_theta_beta",
}


@dataclass
class Evaluation:
    """Model values and requested derivatives at every observation."""

    x: np.ndarray
    resid: np.ndarray
    d: dict
    bundle: object = None


def evaluate(params: Parameters, data: Dataset, basis: SplineBasis, h: float = 1 / 256,
             need: Sequence[str] = (), method: str = "propagate") -> Evaluation:
    """Solve every curve and interpolate X̃ (and derivatives in ``need``) at the data.

    ``need`` holds keys of ``_PATHS``: a, theta, beta for first order and
    aa, tt, bb, tb for second order.
    """
    fld = VectorField(basis, params.beta, params.theta[data.curve_subject])
    bundle = solve_bundle(fld, params.a, h)
    names = [_PATHS[k] for k in need]
    if names:
        second = any(k in ("aa", "tt", "bb", "tb") for k in need)
        done = False
        if method in ("closed", "auto"):
            try:
                closed_form_paths(bundle, "second" if second else "first")
                done = True
            except PreconditionError:
                if method == "closed":
                    raise
        if not done:
            propagate_sensitivities(bundle, "second" if second else "first", which=names)
    at = bundle.at_times(data.obs_curve, data.times, ["x", *names])
    x = at.pop("x")
    d = {k: at[_PATHS[k]] for k in need}
    return Evaluation(x=x, resid=data.values - x, d=d, bundle=bundle)


def residuals(params: Parameters, data: Dataset, basis: SplineBasis, h: float = 1 / 256):
    """ε̃_ilj = Y_ilj − X̃_il(t_ilj)."""
    return evaluate(params, data, basis, h).resid


def alpha_of(params: Parameters, config: FitConfig) -> float:
    return float(np.mean(params.a)) if config.alpha is None else float(config.alpha)


def _lambda1_mask(data: Dataset):
    """Curves whose a enters the λ1 penalty: the ones being estimated."""
    return ~data.a_fixed


def penalty_terms(params: Parameters, data: Dataset, config: FitConfig,
                  penalty: PenaltyMatrix) -> dict:
    alpha = alpha_of(params, config)
    dev = (params.a - alpha)[_lambda1_mask(data)]
    return {
        "a": config.lambda1 * float(dev @ dev),
        "theta": config.lambda2 * float(params.theta @ params.theta),
        "beta": penalty.quadratic(params.beta),
    }


def loss(params: Parameters, data: Dataset, basis: SplineBasis, config: FitConfig,
         penalty: PenaltyMatrix | None = None, resid=None) -> float:
    """Σ(Y − X̃)² + λ1 Σ(a − α)² + λ2 Σθ² + βᵀBβ."""
    penalty = config.penalty(basis) if penalty is None else penalty
    if resid is None:
        resid = residuals(params, data, basis, config.h)
    pt = penalty_terms(params, data, config, penalty)
    return float(resid @ resid) + pt["a"] + pt["theta"] + pt["beta"]


def loss_terms(params: Parameters, data: Dataset, config: FitConfig, resid) -> np.ndarray:
    """Per-observation ℓ_ilj = ε² + (λ1/m_il)(a_il − α)² + (λ2/m_i·)θ_i².

    Summing over all observations and adding βᵀBβ gives :func:`loss`.
    """
    alpha = alpha_of(params, config)
    dev2 = np.where(_lambda1_mask(data), (params.a - alpha) ** 2, 0.0)
    share_a = config.lambda1 * dev2 / data.m_il
    share_t = config.lambda2 * params.theta ** 2 / data.m_i
    return resid ** 2 + share_a[data.obs_curve] + share_t[data.obs_subject]


@dataclass(frozen=True)
class VarianceEstimates:
    sigma_eps2: float
    sigma_a2: float
    sigma_theta2: float

    def lambdas(self, previous=(None, None)):
        """(λ1, λ2) = σ²_ε/σ²_a, σ²_ε/σ²_θ; a zero denominator keeps the previous value."""
        l1 = self.sigma_eps2 / self.sigma_a2 if self.sigma_a2 > 0 else previous[0]
        l2 = self.sigma_eps2 / self.sigma_theta2 if self.sigma_theta2 > 0 else previous[1]
        return l1, l2


def variance_estimates(params: Parameters, data: Dataset, resid, M: int,
                       alpha: float | None = None) -> VarianceEstimates:
    """Moment estimates of σ²_ε, σ²_a, σ²_θ from current residuals and effects.

    Curves with known initial conditions do not consume a degree of freedom.
    """
    n_est = int(np.sum(~data.a_fixed))
    dof = data.m_dotdot - n_est - data.n - M
    if dof <= 0:
        raise ConfigError(f"no residual degrees of freedom (m..={data.m_dotdot}, "
                          f"curves={n_est}, n={data.n}, M={M})")
    if data.N_dot < 2 or data.n < 2:
        raise ConfigError("variance estimation needs at least two curves and two subjects")
    resid = np.asarray(resid, dtype=float)
    alpha = float(np.mean(params.a)) if alpha is None else alpha
    s_eps = float(resid @ resid) / dof
    s_a = float(np.sum((params.a - alpha) ** 2)) / (data.N_dot - 1)
    s_t = float(params.theta @ params.theta) / (data.n - 1)
    return VarianceEstimates(s_eps, s_a, s_t)
