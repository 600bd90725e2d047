"""Synthetic data sets and the Monte Carlo study harness.

Per-replicate seeds come from ``np.random.SeedSequence(master).spawn``, so a
replicate's data do not depend on how many replicates run or in what order.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.integrate import simpson

from .basis import SplineBasis, centered_basis
from .errors import ConfigError, DataError, NumericError, SemiodeError
from .model import Dataset, FitConfig, Parameters
from .ode import VectorField, eval_at_times, solve_bundle

log = logging.getLogger(__name__)

TRUTH_KNOTS = (0.35, 0.6, 0.85, 1.1)
TRUTH_BETA = (0.1, 1.2, 1.6, 0.4)
ISE_DOMAIN = (0.15, 1.2)


def scaled_chi2(mean: float, sd: float):
    """(c, k) with c·χ²_k having the given mean and sd: c·k = mean, 2c²k = sd²."""
    if mean <= 0 or sd <= 0:
        raise ConfigError("scaled chi-square needs positive mean and sd")
    c = sd ** 2 / (2 * mean)
    return c, mean / c


@dataclass
class SimConfig:
    n: int = 10
    N: int = 20
    m_lo: int = 5
    m_hi: int = 20
    theta_sd: float = 0.1
    alpha: float = 0.25
    sigma_a: float = 0.05
    noise_sd: float = 0.01
    truth_knots: tuple = TRUTH_KNOTS
    truth_beta: tuple = TRUTH_BETA
    truth_degree: int = 3
    a_known: bool = False
    seed: int = 0
    h_truth: float = 1.0 / 1024
    kind: str = "paper"

    def __post_init__(self):
        self.truth_knots = tuple(float(k) for k in self.truth_knots)
        self.truth_beta = tuple(float(b) for b in self.truth_beta)
        if self.kind not in ("paper", "plant"):
            raise ConfigError("kind must be 'paper' or 'plant'")
        if self.n < 1 or self.N < 1:
            raise ConfigError("n and N must be positive")
        if not 1 <= self.m_lo <= self.m_hi:
            raise ConfigError("need 1 <= m_lo <= m_hi")
        for name in ("theta_sd", "sigma_a", "noise_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @classmethod
    def preset(cls, name: str, **kw) -> "SimConfig":
        """``moderate`` or ``sparse`` from the simulation protocol; ``plant`` for the plant-like set."""
        presets = {
            "moderate": {},
            "sparse": {"m_lo": 3, "m_hi": 8},
            "plant": {"kind": "plant", "n": 10, "N": 8, "m_lo": 2, "m_hi": 17,
                      "noise_sd": 0.05, "a_known": True},
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **kw})

    def truth_basis(self) -> SplineBasis:
        if self.kind == "plant":
            return plant_truth()[0]
        return centered_basis(self.truth_knots, self.truth_degree)

    def truth_coef(self) -> np.ndarray:
        if self.kind == "plant":
            return plant_truth()[1]
        return np.asarray(self.truth_beta)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["truth_knots"] = list(self.truth_knots)
        out["truth_beta"] = list(self.truth_beta)
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "SimConfig":
        spec = dict(spec)
        preset = spec.pop("preset", None)
        known = {f.name for f in fields(cls)}
        extra = set(spec) - known
        if extra:
            raise ConfigError(f"unknown simulation options: {sorted(extra)}")
        try:
            return cls.preset(preset, **spec) if preset else cls(**spec)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Simulation:
    data: Dataset
    truth: Parameters
    basis: SplineBasis


# plant-shaped truth: growth velocity rising from zero at the tip to a plateau
PLANT_HOURS = 12.0
PLANT_VMAX = 1.2       # mm / h
PLANT_SCALE = 3.0      # mm
PLANT_DOMAIN = (0.0, 30.0)


def plant_velocity(x):
    """Displacement rate in mm/h: g(0) = g'(0) = 0 and a plateau beyond ~8 mm."""
    x = np.asarray(x, dtype=float)
    return PLANT_VMAX * (1 - np.exp(-(np.maximum(x, 0) / PLANT_SCALE) ** 2))


def plant_truth():
    """Zero-at-origin clamped basis and coefficients for 12 h × plant_velocity."""
    basis = SplineBasis(knots=(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 14.0, 20.0), degree=3,
                        layout="clamped", domain=PLANT_DOMAIN, boundary_mode="zero_at_origin")
    x = np.linspace(*PLANT_DOMAIN, 2001)
    D = basis.design(x)
    coef, *_ = np.linalg.lstsq(D, PLANT_HOURS * plant_velocity(x), rcond=None)
    return basis, coef


def simulate(config: SimConfig, seed: int | None = None) -> Simulation:
    """Draw one data set (with its true parameters) from the configured model."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    basis = config.truth_basis()
    beta = config.truth_coef()
    n, N = config.n, config.N
    theta = rng.normal(0.0, config.theta_sd, n) if config.theta_sd > 0 else np.zeros(n)
    if config.kind == "plant":
        n_curves = rng.integers(max(2, N // 2), N + 1, size=n)
        curve_subject = np.repeat(np.arange(n), n_curves)
        a = rng.uniform(0.3, 8.0, curve_subject.size)
        m = rng.integers(config.m_lo, config.m_hi + 1, size=curve_subject.size)
        # images every 45 min; a curve is a run of consecutive frames
        frames = np.arange(17) * 0.75
        times_raw = []
        for mi in m:
            start = rng.integers(0, 17 - mi + 1)
            times_raw.append(frames[start:start + mi])
        t_lists = [tr / PLANT_HOURS for tr in times_raw]
        window = (0.0, PLANT_HOURS)
    else:
        curve_subject = np.repeat(np.arange(n), N)
        if config.sigma_a > 0:
            c, k = scaled_chi2(config.alpha, config.sigma_a)
            a = c * rng.chisquare(k, curve_subject.size)
        else:
            a = np.full(curve_subject.size, config.alpha)
        m = rng.integers(config.m_lo, config.m_hi + 1, size=curve_subject.size)
        t_lists = [np.sort(rng.uniform(0.0, 1.0, mi)) for mi in m]
        window = (0.0, 1.0)
    C = curve_subject.size
    fld = VectorField(basis, beta, theta[curve_subject])
    try:
        bundle = solve_bundle(fld, a, config.h_truth)
    except NumericError as exc:
        raise DataError(f"true trajectories are not solvable: {exc}") from exc
    lo, hi = basis.domain
    if np.any(bundle.x < lo) or np.any(bundle.x >= hi):
        raise DataError("a true trajectory leaves the support of the truth basis")
    obs_curve = np.repeat(np.arange(C), m)
    times = np.concatenate(t_lists)
    x = eval_at_times(bundle, times, obs_curve)
    noise = rng.normal(0.0, config.noise_sd, times.size) if config.noise_sd > 0 else 0.0
    values = x + noise
    data = Dataset(
        subject_ids=tuple(f"s{i + 1:02d}" for i in range(n)),
        curve_ids=tuple(f"c{c + 1:03d}" for c in range(C)),
        curve_subject=curve_subject,
        obs_curve=obs_curve,
        times=times,
        values=values,
        a_known=a.copy() if config.a_known else None,
        time_window=window,
        units={"time": "h", "value": "mm"} if config.kind == "plant" else {},
    )
    return Simulation(data=data, truth=Parameters(a, theta, beta), basis=basis)


def generate(config: SimConfig, seed: int | None = None) -> Dataset:
    return simulate(config, seed).data


def replicate_seeds(master: int, replicates: int) -> list:
    """Independent per-replicate seeds split from the master seed."""
    children = np.random.SeedSequence(master).spawn(replicates)
    return [int(c.generate_state(1)[0]) for c in children]


# metrics ------------------------------------------------------------------

def mise_ise(g_hat, g_true, domain=ISE_DOMAIN, n_intervals: int = 512) -> float:
    """∫_domain (ĝ − g)² dx by composite Simpson; each g is (basis, beta) or a callable."""
    lo, hi = (float(v) for v in domain)
    if not hi > lo:
        raise ValueError("empty integration domain")
    x = np.linspace(lo, hi, n_intervals + 1)
    diff = _g_eval(g_hat, x) - _g_eval(g_true, x)
    return float(simpson(diff ** 2, x=x))


def _g_eval(g, x):
    if callable(g):
        return np.asarray(g(x), dtype=float)
    basis, beta = g
    return basis.design(x) @ np.asarray(beta, dtype=float)


def mspe_spe(theta_hat, theta_true) -> float:
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_hat.shape != theta_true.shape:
        raise ValueError("theta vectors differ in length")
    return float(np.mean((theta_hat - theta_true) ** 2))


# study --------------------------------------------------------------------

STUDY_COLUMNS = ("replicate", "seed", "selected_M", "selected_id", "ise", "spe",
                 "ise_selected", "converged", "lm_iters", "nr_iters", "seconds", "error")


@dataclass
class StudyReport:
    rows: list
    model_ids: list
    reference_id: str | None = None
    candidates: list = field(default_factory=list)

    def _ok(self, key):
        return np.array([r[key] for r in self.rows if r.get(key) is not None
                         and np.isfinite(r[key])], dtype=float)

    @property
    def mise(self) -> float:
        v = self._ok("ise")
        return float(v.mean()) if v.size else float("nan")

    @property
    def sd_ise(self) -> float:
        v = self._ok("ise")
        return float(v.std(ddof=1)) if v.size > 1 else float("nan")

    @property
    def mspe(self) -> float:
        v = self._ok("spe")
        return float(v.mean()) if v.size else float("nan")

    @property
    def sd_spe(self) -> float:
        v = self._ok("spe")
        return float(v.std(ddof=1)) if v.size > 1 else float("nan")

    def selection_counts(self) -> dict:
        counts = {m: 0 for m in self.model_ids}
        for r in self.rows:
            if r.get("selected_id") in counts:
                counts[r["selected_id"]] += 1
        return counts

    def convergence_counts(self) -> dict:
        counts = {m: 0 for m in self.model_ids}
        for c in self.candidates:
            if c["converged"]:
                counts[c["model_id"]] += 1
        return counts

    def summary(self) -> dict:
        return {"replicates": len(self.rows), "MISEx100": 100 * self.mise,
                "SD_ISEx100": 100 * self.sd_ise, "MSPEx100": 100 * self.mspe,
                "SD_SPEx100": 100 * self.sd_spe,
                "selected": self.selection_counts(), "converged": self.convergence_counts()}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STUDY_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def write_tables(self, path):
        """Selection/convergence counts and ×100 aggregates in the layout of the study tables."""
        conv, sel = self.convergence_counts(), self.selection_counts()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", *self.model_ids])
            w.writerow(["number_converged", *[conv[m] for m in self.model_ids]])
            w.writerow(["number_selected", *[sel[m] for m in self.model_ids]])
            w.writerow([])
            w.writerow(["MISEx100", "SD_ISEx100", "MSPEx100", "SD_SPEx100"])
            w.writerow([f"{100 * self.mise:.4f}", f"{100 * self.sd_ise:.4f}",
                        f"{100 * self.mspe:.4f}", f"{100 * self.sd_spe:.4f}"])


def run_study(sim: SimConfig, model_grid, fit_config: FitConfig, replicates: int,
              reference_id: str | None = None, select: bool = True,
              ise_domain=ISE_DOMAIN, progress=None) -> StudyReport:
    """Generate, fit every candidate, select by approximate CV, and score.

    ``ise``/``spe`` are measured on the ``reference_id`` candidate (the true
    model) when given, else on the selected one.  With ``select=False``
    only the reference model is fitted and no CV is computed.
    """
    from .selection import model_search

    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    ids = [m.model_id for m in model_grid]
    if reference_id is not None and reference_id not in ids:
        raise ConfigError(f"reference model {reference_id!r} is not in the grid")
    grid = model_grid if select else [m for m in model_grid if m.model_id == (reference_id or ids[0])]
    rows, cands = [], []
    truth_basis = sim.truth_basis()
    truth_beta = sim.truth_coef()
    for r, seed in enumerate(replicate_seeds(sim.seed, replicates)):
        t0 = time.perf_counter()
        row = {"replicate": r, "seed": seed, "error": ""}
        try:
            simu = simulate(sim, seed)
            report = model_search(simu.data, grid, fit_config, raise_if_none=False,
                                  compute_cv=select)
            for c in report.rows:
                cands.append({"replicate": r, **c})
            sel = report.selected
            ref = report.fits.get(reference_id or (sel.model_id if sel else None))
            if sel is not None:
                row["selected_M"] = sel.basis.M
                row["selected_id"] = sel.model_id
                fs = report.fits[sel.model_id]
                row["ise_selected"] = mise_ise((sel.basis, fs.params.beta),
                                               (truth_basis, truth_beta), ise_domain)
            if ref is not None:
                spec = next(m for m in grid if m.model_id == (reference_id or sel.model_id))
                row["ise"] = mise_ise((spec.basis, ref.params.beta),
                                      (truth_basis, truth_beta), ise_domain)
                row["spe"] = mspe_spe(ref.params.theta, simu.truth.theta)
                row["converged"] = ref.ok
                row["lm_iters"] = ref.iters["lm"]
                row["nr_iters"] = ref.iters["nr"]
        except SemiodeError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("replicate %d failed: %s", r, exc)
        row["seconds"] = round(time.perf_counter() - t0, 3)
        rows.append(row)
        if progress:
            progress(row)
    if all(r["error"] for r in rows):
        raise NumericError("every replicate failed: " + rows[0]["error"])
    return StudyReport(rows=rows, model_ids=ids, reference_id=reference_id, candidates=cands)
