import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmp import gmm
from rmp.checks import fd_gradient, random_measurement
from rmp.gmm import GaussianMixture, LinearGaussianMeasurement, Perturbation
from rmp.guidance import BoundGuidance, GuidanceStrategy
from rmp.models import MixtureScoreModel, ScoreFunctionModel
from rmp.oracle import posterior_mean_closed_form
from rmp.reverse import PosteriorStats, moments
from rmp.schedule import VESchedule, ve_geometric, vp_linear
from rmp.solver import (
    RMPConfig,
    assemble_gradient,
    fixed_precision,
    fixed_precision_ve,
    fixed_precision_vp,
    ngd_mean_step,
    ngd_precision_step,
    run_rmp,
    transition_hessian_trace,
    transition_log_density,
    transition_score,
)
from rmp.toy import toy_measurement, toy_mixture, toy_schedule

VE3 = VESchedule([0.0, 1.0, 2.0])


def test_fixed_precision_ve_examples():
    assert fixed_precision_ve(VE3, 1, T_s=0) == pytest.approx(0.75)
    assert fixed_precision_ve(VE3, 1, T_s=1) == pytest.approx(3.0)
    # sigma_0 = 0 always takes the plain gap
    assert fixed_precision_ve(VE3, 0, T_s=0) == pytest.approx(1.0)
    with pytest.raises(IndexError):
        fixed_precision_ve(VE3, 2, T_s=0)


def test_fixed_precision_ve_close_to_true_cov_at_large_k():
    s = ve_geometric(200, 0.01, 50.0)
    v = 0.04
    for k in range(150, 200):
        true = moments(s, k, v).cov
        assert abs(fixed_precision_ve(s, k, 100) - true) / true < v / s.sigma_sq[k]


def test_fixed_precision_vp_close_to_true_cov_at_large_k():
    s = toy_schedule()
    assert fixed_precision_vp(s, 0) == s.betas[1]
    for k in range(s.T // 2, s.T):
        true = moments(s, k, 0.04).cov
        assert abs(fixed_precision(s, k, 0) - true) / true < 0.01


def test_transition_ve_example():
    assert transition_score(VESchedule([0.0, 1.0]), 0, np.array([2.0]), np.array([0.0]))[0] == pytest.approx(2.0)


@pytest.mark.parametrize("s", [ve_geometric(5, 0.1, 3.0), vp_linear(5, 0.01, 0.3)], ids=["ve", "vp"])
def test_transition_score_and_trace_by_finite_difference(s, rng):
    for k in range(s.T):
        x_next, x = rng.normal(size=2), rng.normal(size=2)
        fd = fd_gradient(lambda z: transition_log_density(s, k, x_next, z), x, 1e-4)
        np.testing.assert_allclose(transition_score(s, k, x_next, x), fd, rtol=1e-7, atol=1e-8)
        h = 1e-3
        tr = sum(
            (transition_score(s, k, x_next, x + h * e) - transition_score(s, k, x_next, x - h * e))[i] / (2 * h)
            for i, e in enumerate(np.eye(2))
        )
        assert transition_hessian_trace(s, k, 2) == pytest.approx(tr, rel=1e-9)


def test_transition_vp_stationary_point():
    s = vp_linear(4, 0.1, 0.4)
    x_next = np.array([0.7])
    x = x_next / math.sqrt(1.0 - s.betas[2])
    assert abs(transition_score(s, 1, x_next, x)[0]) < 1e-14


def test_ngd_mean_step_solves_gaussian_in_one_step():
    # target N(0, 0.5): gradient -(x)/0.5 at the mean 1 is -2
    assert ngd_mean_step(np.array([1.0]), 0.5, np.array([-2.0]), 1.0)[0] == pytest.approx(0.0)
    with pytest.raises(FloatingPointError):
        ngd_mean_step(np.array([1.0]), 0.5, np.array([np.inf]), 1.0)


@given(lam=st.floats(1e-3, 1e3), d=st.integers(1, 5), s2=st.floats(1e-4, 0.1))
def test_ngd_precision_fixed_point(lam, d, s2):
    assert ngd_precision_step(lam, -d * lam, s2, d) == pytest.approx(lam, rel=1e-12)


def test_ngd_precision_floor_and_non_finite():
    assert ngd_precision_step(1.0, 1e6, 0.1, 1, floor=1e-3) == 1e-3
    with pytest.raises(FloatingPointError):
        ngd_precision_step(1.0, float("nan"), 0.1, 1)


# -- one conjugate step -----------------------------------------------------------


@given(seed=st.integers(0, 2**31), k=st.integers(0, 9))
def test_one_step_lands_on_true_reverse_mean(seed, k):
    """Single Gaussian prior, exact guidance, exact expectation, true precision: one step is exact."""
    rng = np.random.default_rng(seed)
    s = vp_linear(10, 0.01, 0.3)
    m0, v0 = float(rng.normal()), float(rng.uniform(0.1, 2.0))
    prior = GaussianMixture.single([m0], v0)
    meas = LinearGaussianMeasurement.scalar(float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.2, 1.0)))
    y = np.array([rng.normal()])
    post = gmm.posterior_mixture(prior, meas, y)
    stats = PosteriorStats(post.mean, float(post.covariance[0, 0]))
    mom = moments(s, k, stats.variance)
    x_next = rng.normal(size=1)
    target = mom.v1 * x_next + mom.v2 * stats.mean

    model = MixtureScoreModel(prior)
    guide = BoundGuidance(GuidanceStrategy("exact"), model, meas, y)
    mu = rng.normal(size=1)
    z, w = np.polynomial.hermite_e.hermegauss(4)
    w = w / w.sum()
    xs = mu + math.sqrt(mom.cov) * z[:, None]
    grad = w @ assemble_gradient(xs, x_next, s, k, model, guide).total
    np.testing.assert_allclose(ngd_mean_step(mu, mom.cov, grad, 1.0), target, rtol=1e-8, atol=1e-10)


def test_assemble_gradient_rejects_non_finite():
    bad = ScoreFunctionModel(lambda x, p: np.full_like(np.atleast_2d(x), np.inf), 1)
    guide = BoundGuidance(GuidanceStrategy("prior_free"), bad, toy_measurement(), [0.2])
    with pytest.raises(FloatingPointError):
        assemble_gradient(np.zeros((2, 1)), np.zeros(1), toy_schedule(10), 3, bad, guide)


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(T_in=0), dict(L=0), dict(s1=0.0), dict(T_s=11), dict(precision_mode="adam"),
     dict(precision_mode="learned"), dict(lambda_min=0.0), dict(expectation="mc"), dict(quad_order=0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RMPConfig(toy_schedule(10), **kw)


def test_config_switch_default():
    assert RMPConfig(ve_geometric(9, 0.1, 1.0)).switch == 4
    assert RMPConfig(ve_geometric(9, 0.1, 1.0), T_s=2).switch == 2


# -- full runs ----------------------------------------------------------------------------


def _toy_run(**kw):
    kw.setdefault("schedule", toy_schedule(50))
    kw.setdefault("L", 4)
    return run_rmp(RMPConfig(**kw), toy_mixture(), toy_measurement(), [0.2])


def test_run_is_deterministic():
    a, b = _toy_run(seed=3), _toy_run(seed=3)
    assert a.to_csv() == b.to_csv()
    assert not np.array_equal(a.mu, _toy_run(seed=4).mu)


def test_run_records_and_anchor_chain():
    tr = _toy_run(T_in=3, x_T=[0.4])
    np.testing.assert_array_equal(tr.ks, np.arange(49, -1, -1))
    np.testing.assert_array_equal(tr.mu_start[0], [0.4])
    np.testing.assert_array_equal(tr.mu_start[1:], tr.mu[:-1])
    np.testing.assert_array_equal(tr.x_T, [0.4])
    assert tr.status == "ok" and tr.mu0.shape == (1,)
    np.testing.assert_array_equal(tr.gamma, 1.0)


@pytest.mark.parametrize("kind", ["prior_free", "dps", "exact"])
def test_nfe_accounting(kind):
    tr = _toy_run(T_in=2, L=3, guidance=GuidanceStrategy(kind))
    assert tr.total_nfe == 50 * 2 * 3
    np.testing.assert_array_equal(np.diff(np.r_[0, tr.nfe]), 6)


def test_quadrature_nfe():
    tr = _toy_run(expectation="quadrature", quad_order=5)
    assert tr.total_nfe == 50 * 5


def test_abort_returns_partial_trajectory():
    def score(x, p):
        x = np.atleast_2d(x)
        return np.full_like(x, np.nan) if p.level > 0.9 else -x

    model = ScoreFunctionModel(score, 1)
    tr = run_rmp(RMPConfig(toy_schedule(50), guidance=GuidanceStrategy("prior_free")), model, toy_measurement(), [0.2])
    assert tr.status == "aborted" and "non-finite" in tr.error
    assert tr.mu0 is None
    assert 0 < tr.ks.size < 50


def test_unguided_symmetric_start_stays_at_zero():
    m = GaussianMixture.single([0.0], 1.0)
    cfg = RMPConfig(toy_schedule(100), guidance=GuidanceStrategy("exact", zeta=0.0), x_T=[0.0],
                    expectation="quadrature")
    tr = run_rmp(cfg, m, toy_measurement(), [1.0])
    assert abs(tr.mu0[0]) < 1e-12
    np.testing.assert_array_equal(tr.gamma, 0.0)


def test_quadrature_run_recovers_conjugate_posterior_mean():
    m = GaussianMixture.single([0.0], 1.0)
    meas = toy_measurement()
    cfg = RMPConfig(toy_schedule(), x_T=[0.0], expectation="quadrature", guidance=GuidanceStrategy("exact"))
    tr = run_rmp(cfg, m, meas, [1.0])
    assert tr.mu0[0] == pytest.approx(posterior_mean_closed_form(m, meas, [1.0])[0], abs=0.02)


def test_learned_precision_run():
    fixed = _toy_run(seed=1)
    learned = _toy_run(seed=1, precision_mode="learned", s2=1e-3)
    assert learned.status == "ok"
    assert np.all(np.isfinite(learned.lambda_inv)) and np.all(learned.lambda_inv > 0)
    assert not np.allclose(learned.lambda_inv, fixed.lambda_inv)


def test_learned_needs_hessian_trace():
    model = ScoreFunctionModel(lambda x, p: -np.atleast_2d(x), 1)
    cfg = RMPConfig(toy_schedule(10), precision_mode="learned", s2=1e-3, guidance=GuidanceStrategy("prior_free"))
    with pytest.raises(TypeError):
        run_rmp(cfg, model, toy_measurement(), [0.2])


def test_vector_run_shapes():
    rng = np.random.default_rng(0)
    m = GaussianMixture.single(np.zeros(3), 1.0)
    meas = random_measurement(rng, 3)
    tr = run_rmp(RMPConfig(ve_geometric(20, 0.01, 5.0), L=2), m, meas, rng.normal(size=meas.M))
    assert tr.mu.shape == (20, 3)
    assert tr.csv_header()[:5] == ["k", "i", "mu0", "mu1", "mu2"]
    with pytest.raises(ValueError):
        run_rmp(RMPConfig(ve_geometric(5, 0.01, 5.0), x_T=[0.0]), m, meas, rng.normal(size=meas.M))


def test_nfe_counts_dps_finite_difference_jacobian():
    # a black-box model has no Hessian, so DPS differentiates the score: 2 d extra calls per point
    model = ScoreFunctionModel(lambda x, p: -np.atleast_2d(x) / (p.noise_var + p.scale**2), 1)
    cfg = RMPConfig(toy_schedule(20), L=3, guidance=GuidanceStrategy("dps"))
    tr = run_rmp(cfg, model, toy_measurement(), [0.2])
    assert tr.total_nfe == 20 * 3 * (1 + 2)
