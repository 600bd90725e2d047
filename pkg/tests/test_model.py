import numpy as np
import pytest

from semiode.basis import centered_basis
from semiode.errors import ConfigError, DataError
from semiode.model import (Dataset, FitConfig, Parameters, VarianceEstimates, evaluate, loss,
                           loss_terms, residuals, variance_estimates)
from semiode.sim import SimConfig, simulate

from conftest import NO_PENALTY, make_sim


def test_zero_noise_truth_loss():
    data, truth, basis, _ = make_sim(noise_sd=0.0)
    assert loss(truth, data, basis, NO_PENALTY) <= 1e-8
    assert np.max(np.abs(residuals(truth, data, basis))) < 1e-6


def test_flat_curves_zero_beta():
    data = Dataset.from_records(["s"] * 4 + ["t"] * 3, ["c"] * 4 + ["d"] * 3,
                                [0.1, 0.3, 0.5, 0.9, 0.2, 0.4, 0.6],
                                [0.4] * 4 + [0.7] * 3)
    basis = centered_basis([0.35, 0.6, 0.85, 1.1])
    p = Parameters([0.4, 0.7], [0.0, 0.0], np.zeros(4))
    assert loss(p, data, basis, NO_PENALTY) < 1e-28
    assert np.max(np.abs(residuals(p, data, basis))) < 1e-15


def test_shifted_curve_residuals():
    data, truth, basis, _ = make_sim(noise_sd=0.0, seed=2)
    sl = data.curve_rows(1)
    vals = data.values.copy()
    vals[sl] += 0.03
    shifted = Dataset(data.subject_ids, data.curve_ids, data.curve_subject, data.obs_curve,
                      data.times, vals, data.a_known)
    r = residuals(truth, shifted, basis)
    np.testing.assert_allclose(r[sl], 0.03, atol=1e-6)


def test_gauss_newton_taylor_prediction():
    data, truth, basis, _ = make_sim(noise_sd=0.0, seed=3)
    ev = evaluate(truth, data, basis, need=("beta",))
    J = ev.d["beta"]
    base = loss(truth, data, basis, NO_PENALTY)
    eps = 1e-3
    for r in range(basis.M):
        p = truth.copy()
        p.beta[r] += eps
        got = loss(p, data, basis, NO_PENALTY) - base
        want = eps ** 2 * float(J[:, r] @ J[:, r])
        assert abs(got - want) <= 0.1 * want


def test_loss_decomposition():
    data, truth, basis, _ = make_sim(seed=4, a_known=False)
    cfg = FitConfig(lambda1=0.3, lambda2=0.7, A=0.5, lambda_R=2.0)
    p = truth.copy()
    p.a += 0.01
    r = residuals(p, data, basis)
    pen = cfg.penalty(basis)
    total = loss_terms(p, data, cfg, r).sum() + pen.quadratic(p.beta)
    assert abs(total - loss(p, data, basis, cfg)) < 1e-12 * loss(p, data, basis, cfg)


def test_known_a_drops_lambda1_term():
    data, truth, basis, _ = make_sim(seed=5, a_known=True)
    p = truth.copy()
    cfg = FitConfig(lambda1=10.0, lambda2=0.0)
    assert abs(loss(p, data, basis, cfg) - loss(p, data, basis, NO_PENALTY)) < 1e-15


def test_identifiability_surface():
    data, truth, basis, _ = make_sim(seed=6)
    c = 0.1
    moved = Parameters(truth.a, truth.theta + c, truth.beta * np.exp(-c))
    x0 = evaluate(truth, data, basis).bundle.x
    x1 = evaluate(moved, data, basis).bundle.x
    assert np.max(np.abs(x0 - x1)) < 1e-9


def test_identified_is_trajectory_invariant():
    _, _, basis, s = make_sim(seed=7)
    raw = s.truth
    ident = raw.identified()
    assert abs(ident.theta.sum()) < 1e-14
    x0 = evaluate(raw, s.data, basis).x
    x1 = evaluate(ident, s.data, basis).x
    assert np.max(np.abs(x0 - x1)) < 1e-9


# variance estimates ---------------------------------------------------------

def test_variance_formula_constant_residual():
    data, truth, basis, _ = make_sim(seed=8, a_known=False)
    r = np.full(data.m_dotdot, 0.02)
    v = variance_estimates(truth, data, r, basis.M)
    dof = data.m_dotdot - data.N_dot - data.n - basis.M
    assert abs(v.sigma_eps2 - data.m_dotdot * 0.02 ** 2 / dof) < 1e-15


def test_variance_zero_theta_keeps_previous_lambda2():
    data, truth, basis, _ = make_sim(seed=9)
    p = Parameters(truth.a, np.zeros(data.n), truth.beta)
    v = variance_estimates(p, data, residuals(p, data, basis), basis.M)
    assert v.sigma_theta2 == 0
    assert v.lambdas((0.04, 0.01))[1] == 0.01


def test_variance_needs_dof():
    data = Dataset.from_records(["s", "s", "t", "t"], ["c", "c", "d", "d"],
                                [0.1, 0.5, 0.2, 0.6], [1, 2, 3, 4])
    p = Parameters([1, 3], [0, 0], np.ones(4))
    with pytest.raises(ConfigError):
        variance_estimates(p, data, np.zeros(4), 4)


def test_variance_order_invariant():
    data, truth, basis, _ = make_sim(seed=10, a_known=False)
    order = np.random.default_rng(0).permutation(data.N_dot)
    rows = np.concatenate([np.arange(data.m_dotdot)[data.curve_rows(c)] for c in order])
    shuffled = Dataset.from_records(
        [data.subject_ids[data.obs_subject[k]] for k in rows],
        [data.curve_ids[data.obs_curve[k]] for k in rows], data.times[rows], data.values[rows])
    pos = {c: i for i, c in enumerate(data.curve_ids)}
    a2 = truth.a[[pos[c] for c in shuffled.curve_ids]]
    th2 = truth.theta[[data.subject_ids.index(s) for s in shuffled.subject_ids]]
    p2 = Parameters(a2, th2, truth.beta)
    v1 = variance_estimates(truth, data, residuals(truth, data, basis), basis.M)
    v2 = variance_estimates(p2, shuffled, residuals(p2, shuffled, basis), basis.M)
    assert v1.sigma_eps2 == pytest.approx(v2.sigma_eps2, rel=1e-12)
    assert v1.sigma_a2 == pytest.approx(v2.sigma_a2, rel=1e-12)
    assert v1.sigma_theta2 == pytest.approx(v2.sigma_theta2, rel=1e-12)


def test_sigma_eps_at_truth_moderate():
    s = simulate(SimConfig(seed=11, a_known=True))
    truth = s.truth.identified()
    r = residuals(truth, s.data, s.basis)
    v = variance_estimates(truth, s.data, r, s.basis.M)
    assert abs(np.sqrt(v.sigma_eps2) - 0.01) < 0.002


def test_lambdas_mapping():
    v = VarianceEstimates(1e-4, 2.5e-3, 1e-2)
    assert v.lambdas() == pytest.approx((0.04, 0.01))


# dataset ---------------------------------------------------------------------

def test_dataset_sorts_and_counts():
    d = Dataset.from_records(["s"] * 3, ["c"] * 3, [0.5, 0.1, 0.9], [2.0, 1.0, 3.0])
    assert (d.n, d.N_dot, d.m_dotdot) == (1, 1, 3)
    np.testing.assert_array_equal(d.values, [1.0, 2.0, 3.0])


def test_dataset_rejects_bad_times():
    with pytest.raises(DataError):
        Dataset.from_records(["s"] * 2, ["c"] * 2, [0.5, 0.5], [1.0, 2.0])
    with pytest.raises(DataError):
        Dataset.from_records(["s"], ["c"], [1.5], [1.0])
    with pytest.raises(DataError):
        Dataset.from_records([], [], [], [])


def test_fitconfig_validation():
    with pytest.raises(ConfigError):
        FitConfig(lambda1=-1)
    with pytest.raises(ConfigError):
        FitConfig(h=1 / 250)
    with pytest.raises(ConfigError):
        FitConfig.from_dict({"lamda1": 0.1})
    cfg = FitConfig.from_dict(FitConfig(lambda2=0.3).to_dict())
    assert cfg == FitConfig(lambda2=0.3)
