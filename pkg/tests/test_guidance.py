import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from rmp import gmm
from rmp.checks import fd_divergence, fd_gradient, random_measurement, random_mixture
from rmp.gmm import GaussianMixture, LinearGaussianMeasurement, Perturbation
from rmp.guidance import (
    BoundGuidance,
    GuidanceStrategy,
    gamma_balance,
    likelihood_hessian_trace_prior_free,
    likelihood_score_dps,
    likelihood_score_exact,
    likelihood_score_prior_free,
    loglik_dps,
    loglik_exact,
    loglik_prior_free,
    tweedie,
    tweedie_ve,
    tweedie_vp,
)
from rmp.models import MixtureScoreModel, ScoreFunctionModel
from rmp.toy import toy_measurement, toy_mixture


def test_tweedie_zero_noise_is_identity():
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(tweedie_ve(x, 0.0, np.array([5.0, 7.0])), x)
    np.testing.assert_array_equal(tweedie_vp(x, 1.0, np.array([5.0, 7.0])), x)


def test_tweedie_conjugate_values():
    assert tweedie_ve(np.array([2.0]), 1.0, np.array([-1.0]))[0] == pytest.approx(1.0)
    assert tweedie_vp(np.array([1.0]), 0.25, np.array([-1.0]))[0] == pytest.approx(0.5)


@pytest.mark.parametrize("p, x", [(Perturbation.ve(0.2), 0.7), (Perturbation.vp(0.5), 0.3)])
def test_tweedie_toy_matches_conditional_mean(p, x):
    m = toy_mixture()
    got = tweedie(np.array([x]), p, gmm.score(gmm.perturb(m, p), [x]))
    assert got[0] == pytest.approx(gmm.conditional_mean(m, p, [x])[0], abs=1e-12)


def test_tweedie_vp_rejects_bad_alpha():
    with pytest.raises(ValueError):
        tweedie_vp(np.zeros(1), 0.0, np.zeros(1))


# -- exact -------------------------------------------------------------------------


def _conjugate_likelihood_score(m: GaussianMixture, meas, p, x, y, extra_cov=True):
    """Score of N(y; A E[x0|xk], A Var[x0|xk] A^T + eps^2 I) for a single Gaussian prior.

    With ``extra_cov=False`` the posterior variance term is dropped (the plug-in form).
    """
    v, mu = m.variances[0], m.means[0]
    c, n = p.scale, p.noise_var
    gain = c * v / (c * c * v + n)
    mean = mu + gain * (x - c * mu)
    post_var = v * n / (c * c * v + n)
    A = meas.matrix
    S = meas.noise_std**2 * np.eye(meas.M) + (post_var * A @ A.T if extra_cov else 0.0)
    return gain * A.T @ np.linalg.solve(S, y - A @ mean)


@given(seed=st.integers(0, 2**31), ab=st.floats(0.01, 1.0))
def test_exact_matches_conjugate_closed_form(seed, ab):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    m = GaussianMixture.single(rng.normal(size=d), float(rng.uniform(0.1, 2.0)))
    meas = random_measurement(rng, d)
    p = Perturbation.vp(ab)
    x, y = rng.normal(size=d), rng.normal(size=meas.M)
    np.testing.assert_allclose(
        likelihood_score_exact(m, meas, y, p, x), _conjugate_likelihood_score(m, meas, p, x, y), rtol=1e-9, atol=1e-10
    )


@given(seed=st.integers(0, 2**31), ab=st.floats(0.01, 1.0))
def test_dps_is_plug_in_conjugate_form(seed, ab):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    m = GaussianMixture.single(rng.normal(size=d), float(rng.uniform(0.1, 2.0)))
    meas = random_measurement(rng, d)
    p = Perturbation.vp(ab)
    model = MixtureScoreModel(m)
    x, y = rng.normal(size=d), rng.normal(size=meas.M)
    got = likelihood_score_dps(model.score, meas, p, x, y, hessian_fn=model.hessian)
    want = _conjugate_likelihood_score(m, meas, p, x, y, extra_cov=False)
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-10)


def test_all_strategies_agree_at_zero_noise(rng):
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = GaussianMixture.single(rng.normal(size=d), float(rng.uniform(0.1, 2.0)))
        meas = random_measurement(rng, d)
        x, y = rng.normal(size=d), rng.normal(size=meas.M)
        model = MixtureScoreModel(m)
        for p in (Perturbation.vp(1.0), Perturbation.ve(0.0)):
            ex = likelihood_score_exact(m, meas, y, p, x)
            np.testing.assert_allclose(likelihood_score_prior_free(meas, p, x, y), ex, atol=1e-10)
            np.testing.assert_allclose(likelihood_score_dps(model.score, meas, p, x, y, hessian_fn=model.hessian), ex, atol=1e-10)


def test_strategies_differ_with_noise():
    # the three strategies are distinct approximations once the kernel adds noise
    m = GaussianMixture.single([0.0], 1.0)
    meas = LinearGaussianMeasurement.scalar(1.0, 0.5)
    p = Perturbation.vp(0.5)
    x, y = np.array([0.4]), np.array([1.0])
    model = MixtureScoreModel(m)
    ex = likelihood_score_exact(m, meas, y, p, x)[0]
    pf = likelihood_score_prior_free(meas, p, x, y)[0]
    dps = likelihood_score_dps(model.score, meas, p, x, y, hessian_fn=model.hessian)[0]
    # hand values: gain sqrt(.5), E[x0|xk] = sqrt(.5) * .4, Var = .5
    g = math.sqrt(0.5)
    assert ex == pytest.approx(g * (1 - g * 0.4) / (0.25 + 0.5), rel=1e-12)
    assert dps == pytest.approx(g * (1 - g * 0.4) / 0.25, rel=1e-12)
    assert pf == pytest.approx((1 - 0.4 / g) / g / (0.5 / 0.5 + 0.25), rel=1e-12)
    assert len({round(ex, 6), round(pf, 6), round(dps, 6)}) == 3


def test_exact_uninformative_limit():
    m = toy_mixture()
    meas = LinearGaussianMeasurement.scalar(1.0, 1e6)
    assert abs(likelihood_score_exact(m, meas, [0.5], Perturbation.vp(0.5), [0.2])[0]) < 1e-10


def test_exact_toy_against_quadrature_likelihood():
    m, meas = toy_mixture(), toy_measurement()
    p = Perturbation.vp(0.5)
    y = 0.2

    def log_lik(xk):
        # p(y | x_k) = int p(y|x0) p(x0|xk) dx0, with p(x0|xk) proportional to p(xk|x0) p(x0)
        c, n = p.scale, p.noise_var
        joint = lambda x0: math.exp(gmm.log_density(m, [x0]) - (xk - c * x0) ** 2 / (2 * n))
        num = quad(lambda x0: joint(x0) * math.exp(-((y - x0) ** 2) / 0.5) / math.sqrt(0.5 * math.pi), -4, 4, points=[-1, 1], epsabs=1e-14)[0]
        den = quad(joint, -4, 4, points=[-1, 1], epsabs=1e-14)[0]
        return math.log(num / den)

    h = 1e-4
    fd = (log_lik(0.2 + h) - log_lik(0.2 - h)) / (2 * h)
    assert likelihood_score_exact(m, meas, [y], p, [0.2])[0] == pytest.approx(fd, rel=1e-4)
    assert loglik_exact(m, meas, [y], p, [0.2]) == pytest.approx(log_lik(0.2), rel=1e-8)


# -- prior-free ------------------------------------------------------------------------


def test_prior_free_clean_limit():
    meas = LinearGaussianMeasurement.scalar(1.0, 0.5)
    got = likelihood_score_prior_free(meas, Perturbation.vp(1.0), np.array([0.3]), np.array([1.0]))
    assert got[0] == pytest.approx((1.0 - 0.3) / 0.25)


def test_prior_free_zero_at_rescaled_point():
    meas = LinearGaussianMeasurement(np.array([[1.0, 2.0]]), 0.3)
    p = Perturbation.vp(0.4)
    x = np.array([0.5, -0.1])
    y = meas.matrix @ x / p.scale
    np.testing.assert_allclose(likelihood_score_prior_free(meas, p, x, y), 0.0, atol=1e-14)


def test_prior_free_toy_finite_difference():
    meas, p = toy_measurement(), Perturbation.vp(0.5)
    h = 1e-5
    fd = (loglik_prior_free(meas, p, [0.2 + h], [1.0]) - loglik_prior_free(meas, p, [0.2 - h], [1.0])) / (2 * h)
    assert likelihood_score_prior_free(meas, p, [0.2], [1.0])[0] == pytest.approx(fd, rel=1e-6)


def test_prior_free_hessian_trace(rng):
    meas = random_measurement(rng, 3)
    p = Perturbation.ve(0.7)
    x = rng.normal(size=3)
    y = rng.normal(size=meas.M)
    fd = fd_divergence(lambda z: likelihood_score_prior_free(meas, p, z, y), x, 1e-3)
    assert likelihood_hessian_trace_prior_free(meas, p) == pytest.approx(fd, rel=1e-8)


# -- DPS ---------------------------------------------------------------------------------------


def test_dps_zero_residual():
    m, meas = toy_mixture(), toy_measurement()
    model = MixtureScoreModel(m)
    p = Perturbation.vp(0.5)
    x = np.array([0.2])
    y = meas.matrix @ tweedie(x, p, model.score(x, p))
    assert abs(likelihood_score_dps(model.score, meas, p, x, y, hessian_fn=model.hessian)[0]) < 1e-14


def test_dps_toy_finite_difference():
    model = MixtureScoreModel(toy_mixture())
    meas, p = toy_measurement(), Perturbation.vp(0.5)
    h = 1e-5
    f = lambda z: loglik_dps(model.score, meas, p, [z], [1.0])
    fd = (f(0.2 + h) - f(0.2 - h)) / (2 * h)
    analytic = likelihood_score_dps(model.score, meas, p, [0.2], [1.0], hessian_fn=model.hessian)[0]
    numeric_jac = likelihood_score_dps(model.score, meas, p, [0.2], [1.0])[0]
    assert analytic == pytest.approx(fd, rel=1e-5)
    assert numeric_jac == pytest.approx(analytic, rel=1e-6)


def test_dps_rejects_non_finite_score():
    bad = ScoreFunctionModel(lambda x, p: np.full_like(np.atleast_2d(x), np.nan), 1)
    with pytest.raises(FloatingPointError):
        likelihood_score_dps(bad.score, toy_measurement(), Perturbation.vp(0.5), [0.2], [1.0])


def test_dimension_mismatch():
    meas = LinearGaussianMeasurement(np.ones((1, 2)), 1.0)
    with pytest.raises(ValueError):
        likelihood_score_prior_free(meas, Perturbation.vp(0.5), np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        likelihood_score_exact(toy_mixture(), meas, np.zeros(1), Perturbation.vp(0.5), np.zeros(1))


# -- balancing --------------------------------------------------------------------------------


def test_gamma_values():
    s = np.array([6.0, 8.0])
    ell = np.array([2.0, 0.0])
    assert gamma_balance(0.15, s, ell) == pytest.approx(0.75)
    assert gamma_balance(0.0, s, ell) == 0.0


def test_gamma_zero_likelihood_warns():
    with pytest.warns(RuntimeWarning):
        assert gamma_balance(0.15, np.ones(2), np.zeros(2)) == 0.0


def test_gamma_batch():
    g = gamma_balance(1.0, np.array([[3.0, 4.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_allclose(g, [5.0, 0.5])


def test_strategy_validation():
    with pytest.raises(ValueError):
        GuidanceStrategy("bogus")
    with pytest.raises(ValueError):
        GuidanceStrategy("dps", zeta=-1.0)


# -- bound guidance ---------------------------------------------------------------------------


def test_exact_needs_analytic_model():
    black_box = ScoreFunctionModel(lambda x, p: -np.asarray(x), 1)
    with pytest.raises(TypeError):
        BoundGuidance(GuidanceStrategy("exact"), black_box, toy_measurement(), [0.2])


@pytest.mark.parametrize("kind", ["exact", "prior_free", "dps"])
def test_bound_hessian_trace_matches_divergence(kind, rng):
    m = random_mixture(rng, 2, 2)
    meas = random_measurement(rng, 2)
    model = MixtureScoreModel(m)
    y = rng.normal(size=meas.M)
    g = BoundGuidance(GuidanceStrategy(kind), model, meas, y)
    p = Perturbation.vp(0.6)
    x = rng.normal(size=2)
    fd = fd_divergence(lambda z: g.score(z, p), x, 1e-3)
    assert g.hessian_trace(x, p)[0] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_bound_unbalanced_gamma_is_one():
    g = BoundGuidance(GuidanceStrategy("prior_free"), MixtureScoreModel(toy_mixture()), toy_measurement(), [0.2])
    np.testing.assert_array_equal(g.gamma(np.ones((3, 1)), np.zeros((3, 1))), 1.0)
    gz = BoundGuidance(GuidanceStrategy("prior_free", 0.5), MixtureScoreModel(toy_mixture()), toy_measurement(), [0.2])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        np.testing.assert_array_equal(gz.gamma(np.ones((2, 1)), np.zeros((2, 1))), 0.0)
