from types import SimpleNamespace

import numpy as np
import pytest

from semiode import selection
from semiode.basis import PenaltyMatrix, centered_basis
from semiode.errors import DataError
from semiode.fitting import fit
from semiode.model import Dataset, FitConfig, evaluate
from semiode.selection import (ModelSpec, SelectionError, approx_cv, empirical_derivatives,
                               exact_cv, golden_section, knot_grid, model_search, stepwise_init)
from semiode.sim import TRUTH_KNOTS

from conftest import NO_PENALTY, make_sim


def test_golden_section_vectorised():
    centres = np.array([0.3, -1.2, 2.0])
    x, fx = golden_section(lambda v: (v - centres) ** 2 + 1, centres - 1.7, centres + 0.9)
    np.testing.assert_allclose(x, centres, atol=1e-7)
    np.testing.assert_allclose(fx, 1.0, atol=1e-13)


def test_empirical_derivatives_linear():
    t = np.array([0.1, 0.25, 0.5, 0.8, 0.9])
    data = Dataset.from_records(["s"] * 5, ["c"] * 5, t, 0.3 + 1.7 * t)
    xh, dxh, curve, dt = empirical_derivatives(data)
    np.testing.assert_allclose(dxh, 1.7, rtol=1e-12)
    np.testing.assert_allclose(xh, 0.3 + 1.7 * (t[1:] + t[:-1]) / 2, rtol=1e-12)
    assert np.all(curve == 0)


def test_empirical_derivatives_two_points():
    data = Dataset.from_records(["s", "s"], ["c", "c"], [0.0, 1.0], [1.0, 3.0])
    xh, dxh, _, _ = empirical_derivatives(data)
    assert xh.tolist() == [2.0] and dxh.tolist() == [2.0]


def test_empirical_derivatives_skip_curve_boundaries():
    data = Dataset.from_records(["s", "s", "t", "t"], ["c", "c", "d", "d"],
                                [0.1, 0.3, 0.2, 0.6], [1.0, 2.0, 5.0, 5.0])
    _, dxh, curve, _ = empirical_derivatives(data)
    np.testing.assert_allclose(dxh, [5.0, 0.0])
    assert curve.tolist() == [0, 1]


def test_empirical_derivatives_duplicate_times():
    # Dataset itself refuses duplicates, so feed the raw arrays directly
    bad = SimpleNamespace(obs_curve=np.zeros(3, int), times=np.array([0.1, 0.2, 0.2]),
                          values=np.array([1.0, 2.0, 3.0]))
    with pytest.raises(DataError):
        empirical_derivatives(bad)


def test_empirical_derivatives_near_true_field():
    data, truth, basis, _ = make_sim(seed=3, noise_sd=0.0, m_lo=15, m_hi=20)
    xh, dxh, curve, dt = empirical_derivatives(data)
    th = truth.theta[data.curve_subject[curve]]
    field = np.exp(th) * (basis.design(xh) @ truth.beta)
    # O(Δt²) band: |X'''|Δt²/24 from the chord plus |g'X''|Δt²/8 from the midpoint value;
    # together they stay below 5Δt² for the truth field on its range
    assert np.all(np.abs(dxh - field) <= 6.0 * dt ** 2 + 1e-6)


def _fake_pairs(monkeypatch, xh, dxh):
    monkeypatch.setattr(selection, "empirical_derivatives",
                        lambda data: (xh, dxh, np.zeros(xh.size, int), np.full(xh.size, 0.1)))


def test_stepwise_pure_square(monkeypatch):
    xh = np.random.default_rng(0).uniform(0.1, 1.2, 60)
    _fake_pairs(monkeypatch, xh, xh ** 2)
    data, *_ = make_sim(seed=0, n=1, N=1)
    r = stepwise_init(data, np.linspace(0.2, 1.1, 10))
    assert r.terms == ["x2"]
    np.testing.assert_allclose(r.coef, [1.0], rtol=1e-10)
    assert r.selected_knots.size == 0


def test_stepwise_zero_response():
    data = Dataset.from_records(["s"] * 4 + ["t"] * 4, ["c"] * 4 + ["d"] * 4,
                                [0.1, 0.3, 0.5, 0.7] * 2, [0.4] * 4 + [0.6] * 4)
    r = stepwise_init(data, [0.3, 0.5], basis=centered_basis(TRUTH_KNOTS))
    assert r.terms == []
    assert np.all(r.g(np.linspace(0, 1, 7)) == 0)
    assert np.all(r.beta0 == 0)


def test_stepwise_bic_not_larger_than_aic():
    knots = np.linspace(0.15, 1.1, 28)
    for seed in range(10):
        data, *_ = make_sim(seed=200 + seed, n=5, N=6, noise_sd=0.01)
        aic = stepwise_init(data, knots, "AIC", direction="forward")
        bic = stepwise_init(data, knots, "BIC", direction="forward")
        assert len(bic.terms) <= len(aic.terms)
        assert len(aic.terms) <= 12


def test_stepwise_projects_onto_basis():
    data, truth, basis, _ = make_sim(seed=4, n=6, N=8, noise_sd=0.0, m_lo=10, m_hi=15)
    r = stepwise_init(data, np.linspace(0.15, 1.1, 12), basis=basis)
    assert r.beta0.shape == (basis.M,)
    x = np.linspace(0.3, 0.9, 50)
    assert np.max(np.abs(basis.design(x) @ r.beta0 - basis.design(x) @ truth.beta)) < 0.3


def test_stepwise_rejects_unknown_criterion():
    data, *_ = make_sim(seed=0)
    with pytest.raises(ValueError):
        stepwise_init(data, [0.5], "AICc")


# CV ---------------------------------------------------------------------------------

@pytest.mark.parametrize("a_known", [True, False])
def test_approx_cv_zero_at_noise_free_truth(a_known):
    data, truth, basis, _ = make_sim(seed=21, noise_sd=0.0, a_known=a_known)
    r = fit(data, basis, NO_PENALTY, init=truth)
    assert approx_cv(r, data, basis, NO_PENALTY) < 1e-6


def test_approx_cv_penalty_dominated_limit():
    data, truth, basis, _ = make_sim(seed=22, noise_sd=0.01)
    cfg = FitConfig(lambda1=0.0, lambda2=1e12)
    r = fit(data, basis, FitConfig(lambda1=0.0, lambda2=0.01), init=truth)
    r.lambda2 = 1e12
    huge = PenaltyMatrix(1e12 * np.eye(basis.M), 0.5, 1e12)
    score = approx_cv(r, data, basis, cfg, penalty=huge)
    in_sample = float(np.sum(evaluate(r.params, data, basis).resid ** 2))
    assert abs(score - in_sample) <= 1e-6 * in_sample


def test_approx_cv_details_sum():
    data, truth, basis, _ = make_sim(seed=23, noise_sd=0.01, a_known=False)
    cfg = FitConfig()
    r = fit(data, basis, cfg, init=truth)
    d = approx_cv(r, data, basis, cfg, details=True)
    assert d.per_curve.shape == (data.N_dot,)
    assert d.score == pytest.approx(d.per_curve.sum(), rel=1e-14)
    # leaving a curve out can only make its own prediction worse on average
    in_sample = np.bincount(data.obs_curve, evaluate(r.params, data, basis).resid ** 2)
    assert d.score > in_sample.sum()


def test_exact_cv_rejects_single_curve():
    data = Dataset.from_records(["s"] * 5, ["c"] * 5, np.linspace(0.1, 0.9, 5),
                                np.linspace(0.3, 0.6, 5))
    with pytest.raises(DataError):
        exact_cv(data, centered_basis(TRUTH_KNOTS), NO_PENALTY)


def test_exact_cv_zero_noise():
    data, truth, basis, _ = make_sim(seed=24, n=2, N=2, m_lo=5, m_hi=5, noise_sd=0.0)
    full = fit(data, basis, NO_PENALTY, init=truth)
    assert exact_cv(data, basis, NO_PENALTY, full=full) < 1e-8


# grid search -----------------------------------------------------------------------------

def test_knot_grid_ids_and_knots():
    grid = knot_grid([2, 4])
    assert [g.model_id for g in grid] == ["M2", "M4"]
    np.testing.assert_allclose(grid[1].basis.knots, TRUTH_KNOTS)


def test_model_search_single_model(tmp_path):
    data, truth, basis, _ = make_sim(seed=25, noise_sd=0.01)
    rep = model_search(data, [ModelSpec("only", basis)], FitConfig())
    assert rep.selected_id == "only"
    rep.write_csv(tmp_path / "cv.csv")
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].split(",")[-3] == "True"


def test_model_search_tie_goes_to_first():
    data, truth, basis, _ = make_sim(seed=26, noise_sd=0.01)
    grid = [ModelSpec("first", basis), ModelSpec("second", basis)]
    rep = model_search(data, grid, FitConfig())
    assert rep.rows[0]["cv_score"] == rep.rows[1]["cv_score"]
    assert rep.selected_id == "first"


def test_model_search_picks_minimum_converged():
    data, *_ = make_sim(seed=27, noise_sd=0.01, n=5, N=5)
    rep = model_search(data, knot_grid([2, 3, 4]), FitConfig())
    ok = [r for r in rep.rows if r["converged"]]
    assert rep.selected_id == min(ok, key=lambda r: r["cv_score"])["model_id"]


def test_model_search_none_converged():
    data, truth, basis, _ = make_sim(seed=28, noise_sd=0.01)
    cfg = FitConfig(max_lm_iters=1, lm_tol=1e-14)
    with pytest.raises(SelectionError) as info:
        model_search(data, [ModelSpec("M4", basis)], cfg)
    assert info.value.report.rows[0]["converged"] is False
    rep = model_search(data, [ModelSpec("M4", basis)], cfg, raise_if_none=False)
    assert rep.selected is None


def test_model_search_empty_grid():
    data, *_ = make_sim(seed=0)
    with pytest.raises(ValueError):
        model_search(data, [], FitConfig())


def test_approx_cv_leave_out_hessian():
    # one curve per subject: dropping the curve leaves only the λ2 curvature,
    # so the corrected θ falls back to (about) the prior mean 0
    data, truth, basis, _ = make_sim(seed=31, n=5, N=1, m_lo=8, m_hi=8, noise_sd=0.01)
    cfg = FitConfig(adaptive_nr=False)
    r = fit(data, basis, cfg, init=truth)
    full = approx_cv(r, data, basis, cfg, details=True)
    out = approx_cv(r, data, basis, cfg, details=True, hessian="leave_out")
    assert np.max(np.abs(out.theta)) < 2e-3
    assert np.max(np.abs(full.theta - r.params.theta)) < 0.05
    assert out.score > full.score
    with pytest.raises(ValueError):
        approx_cv(r, data, basis, cfg, hessian="diagonal")
