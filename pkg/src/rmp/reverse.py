"""Reverse-conditional moments for isotropic posterior statistics and the
deterministic reverse-mean chain built from them.

Only the scalar case ``C_{x_0} = v I`` is implemented, so every coefficient is
a scalar.  ``p_k(x_k | x_{k+1}, y)`` is modelled as Gaussian with mean
``v1 * x_{k+1} + v2 * E[x_0 | y]`` and variance ``cov``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import Schedule, VESchedule, VPSchedule


@dataclass(frozen=True)
class PosteriorStats:
    mean: np.ndarray
    variance: float

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if not np.all(np.isfinite(mean)):
            raise ValueError("posterior mean must be finite")
        if not self.variance > 0:
            raise ValueError(f"posterior variance must be positive, got {self.variance}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", float(self.variance))


@dataclass(frozen=True)
class ReverseMoments:
    v1: float
    v2: float
    cov: float


def _check_step(s: Schedule, k: int, v: float):
    if not 0 <= k <= s.T - 1:
        raise IndexError(f"reverse step {k} outside 0..{s.T - 1}")
    if not v > 0:
        raise ValueError(f"posterior variance must be positive, got {v}")


def moments_ve(s: VESchedule, k: int, v: float) -> ReverseMoments:
    _check_step(s, k, v)
    sk2, sk12 = s.sigma_sq[k], s.sigma_sq[k + 1]
    denom = sk12 + v
    gap = sk12 - sk2
    return ReverseMoments(
        v1=(sk2 + v) / denom,
        v2=gap / denom,
        cov=gap * (sk2 + v) / denom,
    )


def moments_vp(s: VPSchedule, k: int, v: float) -> ReverseMoments:
    _check_step(s, k, v)
    ab_k, ab_k1 = s.alpha_bars[k], s.alpha_bars[k + 1]
    a_k1, b_k1 = s.alphas[k + 1], s.betas[k + 1]
    var_k = 1.0 - ab_k + ab_k * v  # Cov[x_k | y]
    var_k1 = 1.0 - ab_k1 + ab_k1 * v
    ratio = b_k1 / (1.0 - b_k1)
    return ReverseMoments(
        v1=np.sqrt(a_k1) * var_k / var_k1,
        v2=np.sqrt(ab_k) * (1.0 - a_k1) / var_k1,
        cov=ratio * var_k / (ratio + var_k),
    )


def moments(s: Schedule, k: int, v: float) -> ReverseMoments:
    if isinstance(s, VESchedule):
        return moments_ve(s, k, v)
    return moments_vp(s, k, v)


@dataclass(frozen=True)
class ChainTrace:
    """``mus[k]`` is the reverse mean at step k; ``mus[T]`` is the start point."""

    mus: np.ndarray

    @property
    def mu0(self) -> np.ndarray:
        return self.mus[0]


def exact_rmp_chain(s: Schedule, stats: PosteriorStats, mu_T) -> ChainTrace:
    """Iterate ``mu_k = v1(k) mu_{k+1} + v2(k) E[x_0|y]`` from k = T-1 down to 0."""
    mu_T = np.atleast_1d(np.asarray(mu_T, dtype=float))
    if mu_T.shape != stats.mean.shape:
        raise ValueError(f"mu_T shape {mu_T.shape} does not match posterior mean {stats.mean.shape}")
    mus = np.empty((s.T + 1, mu_T.size))
    mus[s.T] = mu_T
    for k in range(s.T - 1, -1, -1):
        mom = moments(s, k, stats.variance)
        mus[k] = mom.v1 * mus[k + 1] + mom.v2 * stats.mean
    return ChainTrace(mus)


def ve_endpoint_coefficients(sigma_0: float, sigma_T: float, v: float) -> tuple[float, float]:
    """Coefficients ``(c_start, c_mean)`` with ``mu_0 = c_start mu_T + c_mean E[x_0|y]``."""
    denom = sigma_T**2 + v
    return (sigma_0**2 + v) / denom, (sigma_T**2 - sigma_0**2) / denom


def vp_endpoint_coefficients(alpha_bar_0: float, alpha_bar_T: float, v: float) -> tuple[float, float]:
    # telescoping requires alpha_bar_0 == 1, guaranteed by VPSchedule
    denom = 1.0 - alpha_bar_T + alpha_bar_T * v
    c_start = np.sqrt(alpha_bar_T) * (1.0 - alpha_bar_0 + alpha_bar_0 * v) / denom
    return float(c_start), (1.0 - alpha_bar_T) / denom


def endpoint_mean_ve(s: VESchedule, stats: PosteriorStats, mu_T) -> np.ndarray:
    c_start, c_mean = ve_endpoint_coefficients(s.sigmas[0], s.sigmas[-1], stats.variance)
    return c_start * np.asarray(mu_T, dtype=float) + c_mean * stats.mean


def endpoint_mean_vp(s: VPSchedule, stats: PosteriorStats, mu_T) -> np.ndarray:
    c_start, c_mean = vp_endpoint_coefficients(s.alpha_bars[0], s.alpha_bars[-1], stats.variance)
    return c_start * np.asarray(mu_T, dtype=float) + c_mean * stats.mean


def endpoint_mean(s: Schedule, stats: PosteriorStats, mu_T) -> np.ndarray:
    if isinstance(s, VESchedule):
        return endpoint_mean_ve(s, stats, mu_T)
    return endpoint_mean_vp(s, stats, mu_T)


def forgetting_factor(s: Schedule, v: float) -> float:
    """``d mu_0 / d mu_T``: the product of all ``v1`` coefficients."""
    return float(np.prod([moments(s, k, v).v1 for k in range(s.T)]))
