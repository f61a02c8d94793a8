import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmp import gmm
from rmp.checks import random_schedule
from rmp.gmm import GaussianMixture, LinearGaussianMeasurement
from rmp.oracle import ConjugateChain
from rmp.reverse import (
    PosteriorStats,
    exact_rmp_chain,
    forgetting_factor,
    moments,
    moments_ve,
    moments_vp,
    endpoint_mean,
    endpoint_mean_ve,
    endpoint_mean_vp,
    ve_endpoint_coefficients,
    vp_endpoint_coefficients,
)
from rmp.schedule import VESchedule, VPSchedule, ve_geometric, vp_linear
from rmp.toy import toy_measurement, toy_mixture, toy_schedule


def test_moments_ve_from_zero():
    m = moments_ve(VESchedule([0.0, 1.0]), 0, 1.0)
    assert (m.v1, m.v2, m.cov) == pytest.approx((0.5, 0.5, 0.5))


def test_moments_ve_hand_values():
    m = moments_ve(VESchedule([0.0, 1.0, 2.0]), 1, 0.04)
    assert m.v1 == pytest.approx(1.04 / 4.04, rel=1e-14)
    assert m.v2 == pytest.approx(3 / 4.04, rel=1e-14)
    assert m.cov == pytest.approx(3 * 1.04 / 4.04, rel=1e-14)


def test_moments_vp_unit_variance():
    s = vp_linear(10, 0.01, 0.2)
    for k in range(10):
        m = moments_vp(s, k, 1.0)
        assert m.v1 == pytest.approx(math.sqrt(s.alphas[k + 1]), rel=1e-14)
        assert m.v2 == pytest.approx(math.sqrt(s.alpha_bars[k]) * (1 - s.alphas[k + 1]), rel=1e-14)


def test_moments_vp_first_step_matches_conditioning():
    # k = 0 (alpha_bar_0 = 1), beta_1 = 0.01, scalar conjugate chain
    s = VPSchedule([0.0, 0.01, 0.02])
    m = GaussianMixture.single([0.4], 0.3)
    chain = ConjugateChain(m, LinearGaussianMeasurement.scalar(1.0, 0.5), [0.9], s)
    v = float(chain.post_cov[0, 0])
    mom = moments_vp(s, 0, v)
    true = chain.true_chain().conditionals[0]
    assert mom.v1 == pytest.approx(math.sqrt(0.99) * v / (0.01 + 0.99 * v), rel=1e-13)
    assert mom.v1 == pytest.approx(true.F[0, 0], rel=1e-12)
    assert mom.v2 * chain.post_mean[0] == pytest.approx(true.b[0], rel=1e-12)
    assert mom.cov == pytest.approx(true.S[0, 0], rel=1e-12)


def test_moments_vp_first_step_monte_carlo():
    # regress x_0 on x_1 under the Gaussian posterior stats and compare slope and residual variance
    s = VPSchedule([0.0, 0.01, 0.02])
    v, mean = 0.2, 0.7
    rng = np.random.default_rng(3)
    n = 1_000_000
    x0 = mean + math.sqrt(v) * rng.standard_normal(n)
    x1 = math.sqrt(0.99) * x0 + 0.1 * rng.standard_normal(n)
    slope, icpt = np.polyfit(x1, x0, 1)
    mom = moments_vp(s, 0, v)
    assert slope == pytest.approx(mom.v1, abs=3e-3)
    assert icpt == pytest.approx(mom.v2 * mean, abs=3e-3)
    assert np.var(x0 - slope * x1 - icpt) == pytest.approx(mom.cov, rel=1e-2)


@given(seed=st.integers(0, 2**31), v=st.floats(1e-3, 10.0))
def test_moment_properties(seed, v):
    rng = np.random.default_rng(seed)
    for kind in ("ve", "vp"):
        s = random_schedule(rng, kind, T_max=50)
        for k in range(s.T):
            m = moments(s, k, v)
            assert m.cov > 0
            if kind == "ve":
                assert m.v1 + m.v2 == pytest.approx(1.0, abs=1e-14)
                assert 0 < m.v1 <= 1
            else:
                b = s.betas[k + 1]
                assert m.cov < b / (1 - b)


def test_moment_errors():
    s = vp_linear(5, 0.01, 0.1)
    with pytest.raises(IndexError):
        moments(s, 5, 1.0)
    with pytest.raises(IndexError):
        moments(s, -1, 1.0)
    with pytest.raises(ValueError):
        moments(s, 2, 0.0)
    with pytest.raises(ValueError):
        PosteriorStats(np.zeros(1), -1.0)


def test_chain_fixed_point_ve():
    s = ve_geometric(20, 0.1, 5.0)
    stats = PosteriorStats([1.3, -0.2], 0.5)
    np.testing.assert_allclose(exact_rmp_chain(s, stats, stats.mean).mu0, stats.mean, rtol=1e-14)


def test_chain_ve_hand_value():
    for T in (2, 7, 50):
        sig = np.concatenate([[0.0], np.linspace(1.0, 10.0, T)])
        mu0 = exact_rmp_chain(VESchedule(sig), PosteriorStats([1.0], 0.04), [5.0]).mu0[0]
        assert mu0 == pytest.approx(0.04 / 100.04 * 5 + 100 / 100.04, rel=1e-13)
        assert mu0 == pytest.approx(1.001599, abs=1e-6)


def test_chain_toy_lands_on_endpoint():
    s = toy_schedule()
    for y in (-1.5, 0.2, 1.5):
        post = gmm.posterior_mixture(toy_mixture(), toy_measurement(), [y])
        stats = PosteriorStats(post.mean, float(post.covariance[0, 0]))
        chain = exact_rmp_chain(s, stats, [0.0])
        np.testing.assert_allclose(chain.mu0, endpoint_mean_vp(s, stats, [0.0]), rtol=1e-10, atol=1e-12)
        assert chain.mus.shape == (1001, 1) and chain.mus[1000, 0] == 0.0


def test_endpoint_ve_degenerate_and_limit():
    assert ve_endpoint_coefficients(2.0, 2.0, 0.3) == (1.0, 0.0)
    c_start, c_mean = ve_endpoint_coefficients(0.0, 100.0, 0.04)
    mu0 = c_start * 5 + c_mean * 1
    assert mu0 - 1 == pytest.approx(0.04 * 4 / 10000.04, rel=1e-10)


def test_endpoint_vp_limits():
    assert vp_endpoint_coefficients(1.0, 1.0, 0.3) == pytest.approx((1.0, 0.0))
    c_start, c_mean = vp_endpoint_coefficients(1.0, 1e-300, 0.3)
    assert c_start == pytest.approx(0.0, abs=1e-140) and c_mean == pytest.approx(1.0)


def test_endpoint_vp_default_schedule_bound():
    s = vp_linear(400, 1e-4, 0.02)
    abT = s.alpha_bars[-1]
    assert abT == pytest.approx(math.exp(np.sum(np.log1p(-s.betas))), rel=1e-12)
    assert abT == pytest.approx(math.exp(-4.02), rel=0.05)  # first-order estimate
    v, mean, mu_T = 0.04, np.array([0.6]), np.array([2.0])
    mu0 = endpoint_mean_vp(s, PosteriorStats(mean, v), mu_T)
    c_start, c_mean = vp_endpoint_coefficients(1.0, abT, v)
    gap = abs(mu0[0] - mean[0])
    assert gap == pytest.approx(abs(c_start * 2.0 + (c_mean - 1.0) * 0.6), rel=1e-12)
    # both coefficients carry a factor v / (1 - abT + abT v) <= 1 for v <= 1
    assert gap <= math.sqrt(abT) * 2.0 + abT * 0.6
    assert gap == pytest.approx(0.0103287, rel=1e-5)  # hand-evaluated


@given(seed=st.integers(0, 2**31))
def test_telescoping_matches_endpoint(seed):
    rng = np.random.default_rng(seed)
    s = random_schedule(rng, T_max=300)
    d = int(rng.integers(1, 4))
    stats = PosteriorStats(rng.normal(size=d), float(rng.uniform(0.01, 3.0)))
    mu_T = rng.normal(scale=2.0, size=d)
    a = exact_rmp_chain(s, stats, mu_T).mu0
    b = endpoint_mean(s, stats, mu_T)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)


def test_forgetting_factor_is_start_coefficient():
    s = toy_schedule()
    assert forgetting_factor(s, 0.04) == pytest.approx(vp_endpoint_coefficients(1.0, s.alpha_bars[-1], 0.04)[0], rel=1e-10)
    ve = ve_geometric(30, 0.01, 100.0)
    assert forgetting_factor(ve, 0.04) == pytest.approx(0.04 / (1e4 + 0.04), rel=1e-10)


def test_chain_shape_mismatch():
    with pytest.raises(ValueError):
        exact_rmp_chain(toy_schedule(10), PosteriorStats([0.0], 1.0), [0.0, 1.0])


def test_ve_endpoint_uses_sigma0():
    s = VESchedule([0.5, 1.0, 3.0])
    stats = PosteriorStats([1.0], 0.2)
    np.testing.assert_allclose(exact_rmp_chain(s, stats, [4.0]).mu0, endpoint_mean_ve(s, stats, [4.0]), rtol=1e-13)
