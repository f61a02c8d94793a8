"""Independent posterior-mean oracles and the KL-decomposition diagnostic.

Three routes to ``E[x_0 | y]``: closed-form mixture conditioning, grid
quadrature (d <= 2), and self-normalised importance sampling with the prior as
proposal.  They share no code beyond the mixture log-density, so agreement
between them is meaningful.

The KL diagnostic builds a fully Gaussian chain ``x_0 -> ... -> x_T`` given y
and compares the joint KL of a variational reverse chain against the sum of
per-step expected conditional KLs plus the terminal KL.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import gmm
from .gmm import GaussianMixture, LinearGaussianMeasurement
from .rng import make_rng
from .schedule import Schedule, VESchedule


class GridTooCoarse(ValueError):
    pass


def posterior_mean_closed_form(model: GaussianMixture, meas: LinearGaussianMeasurement, y) -> np.ndarray:
    return gmm.posterior_mixture(model, meas, y).mean


def _log_likelihood(meas: LinearGaussianMeasurement, y: np.ndarray, xb: np.ndarray) -> np.ndarray:
    r = y[None, :] - xb @ meas.matrix.T
    eps2 = meas.noise_std**2
    return -0.5 * np.sum(r * r, axis=1) / eps2 - 0.5 * meas.M * math.log(2 * math.pi * eps2)


def default_bounds(model: GaussianMixture, width: float = 8.0) -> list[tuple[float, float]]:
    sd = np.sqrt(model.variances)[:, None]
    lo = (model.means - width * sd).min(axis=0)
    hi = (model.means + width * sd).max(axis=0)
    return list(zip(lo.tolist(), hi.tolist()))


def _quad_mean(model, meas, y, bounds, n):
    axes = [np.linspace(lo, hi, n) for lo, hi in bounds]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    logf = gmm.log_density(model, pts) + _log_likelihood(meas, y, pts)
    f = np.exp(logf - logf.max()).reshape(grids[0].shape)

    def integrate(values):
        out = values
        for ax in reversed(axes):
            out = trapezoid(out, ax, axis=-1)
        return out

    z = integrate(f)
    return np.array([integrate(f * g) for g in grids]) / z


@dataclass(frozen=True)
class QuadratureResult:
    mean: np.ndarray
    n: int
    richardson_gap: float


def posterior_mean_quadrature(
    model: GaussianMixture,
    meas: LinearGaussianMeasurement,
    y,
    bounds: Sequence[tuple[float, float]] | None = None,
    n: int = 401,
    tol: float = 1e-6,
    max_n: int = 6401,
) -> QuadratureResult:
    """Trapezoid rule on a tensor grid, refined until n and 2n-1 points agree to ``tol``.

    Raises ``GridTooCoarse`` if the gap is still above ``tol`` at ``max_n``.
    """
    if model.d > 2:
        raise ValueError(f"grid quadrature supports d <= 2, got d={model.d}")
    y = meas.check(model.d, y)
    bounds = default_bounds(model) if bounds is None else [tuple(map(float, b)) for b in bounds]
    if len(bounds) != model.d or any(not lo < hi for lo, hi in bounds):
        raise ValueError(f"need {model.d} increasing (lo, hi) bounds")
    if n < 3:
        raise ValueError("need at least 3 grid points per axis")
    coarse = _quad_mean(model, meas, y, bounds, n)
    while True:
        fine_n = 2 * n - 1
        fine = _quad_mean(model, meas, y, bounds, fine_n)
        gap = float(np.max(np.abs(fine - coarse)))
        if gap <= tol:
            return QuadratureResult(fine, fine_n, gap)
        if fine_n > max_n:
            raise GridTooCoarse(f"quadrature not converged: gap {gap:.3e} at n={fine_n}")
        n, coarse = fine_n, fine


@dataclass(frozen=True)
class ImportanceResult:
    mean: np.ndarray
    stderr: np.ndarray
    ess: float
    reliable: bool


def posterior_mean_importance(
    model: GaussianMixture, meas: LinearGaussianMeasurement, y, n: int, seed: int, min_ess: float = 100.0
) -> ImportanceResult:
    """Self-normalised importance sampling from the prior with delete-one jackknife errors."""
    if n < 10_000:
        raise ValueError(f"importance sampling needs n >= 1e4, got {n}")
    y = meas.check(model.d, y)
    x = model.sample(n, make_rng(seed))
    logw = _log_likelihood(meas, y, x)
    w = np.exp(logw - logw.max())
    sw = w.sum()
    swx = w @ x
    mean = swx / sw
    ess = float(sw**2 / np.sum(w * w))
    # delete-one estimates have the closed form (swx - w_i x_i) / (sw - w_i)
    rest = sw - w
    if np.any(rest <= 0):
        # one sample carries all the weight; the jackknife is undefined
        return ImportanceResult(mean, np.full(x.shape[1], np.inf), ess, False)
    loo = (swx[None, :] - w[:, None] * x) / rest[:, None]
    stderr = np.sqrt((n - 1) / n * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return ImportanceResult(mean, stderr, ess, ess >= min_ess)


# -- KL decomposition on conjugate chains ------------------------------------------


@dataclass(frozen=True)
class GaussianConditional:
    """``N(x_k; F x_{k+1} + b, S)``."""

    F: np.ndarray
    b: np.ndarray
    S: np.ndarray


@dataclass(frozen=True)
class VariationalChain:
    terminal_mean: np.ndarray
    terminal_cov: np.ndarray
    conditionals: tuple[GaussianConditional, ...]  # index k = 0..T-1


def _forward_kernel(s: Schedule, k: int) -> tuple[float, float]:
    """``x_{k+1} = a x_k + sqrt(n) noise``."""
    if isinstance(s, VESchedule):
        return 1.0, float(s.sigma_sq[k + 1] - s.sigma_sq[k])
    return math.sqrt(s.alphas[k + 1]), float(s.betas[k + 1])


class ConjugateChain:
    """Single-Gaussian prior, linear-Gaussian measurement and a forward schedule, given y."""

    def __init__(self, model: GaussianMixture, meas: LinearGaussianMeasurement, y, schedule: Schedule):
        if model.K != 1:
            raise ValueError("KL decomposition check needs a single-Gaussian (conjugate) prior")
        self.model = model
        self.meas = meas
        self.y = meas.check(model.d, y)
        self.schedule = schedule
        post = gmm.posterior_mixture(model, meas, self.y)
        self.post_mean = post.means[0]
        self.post_cov = post.covariances[0]

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def T(self) -> int:
        return self.schedule.T

    def joint(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of (x_0, ..., x_T) | y, built forward from the posterior."""
        d, T = self.d, self.T
        mean = np.zeros((T + 1) * d)
        cov = np.zeros(((T + 1) * d,) * 2)
        mean[:d] = self.post_mean
        cov[:d, :d] = self.post_cov
        for k in range(T):
            a, n = _forward_kernel(self.schedule, k)
            cur, nxt = slice(k * d, (k + 1) * d), slice((k + 1) * d, (k + 2) * d)
            mean[nxt] = a * mean[cur]
            cov[nxt, : (k + 1) * d] = a * cov[cur, : (k + 1) * d]
            cov[: (k + 1) * d, nxt] = cov[nxt, : (k + 1) * d].T
            cov[nxt, nxt] = a * a * cov[cur, cur] + n * np.eye(d)
        return mean, cov

    def true_chain(self) -> VariationalChain:
        """The exact reverse conditionals and terminal marginal, as a variational chain."""
        d, T = self.d, self.T
        mean, cov = self.joint()
        conds = []
        for k in range(T):
            cur, nxt = slice(k * d, (k + 1) * d), slice((k + 1) * d, (k + 2) * d)
            G = np.linalg.solve(cov[nxt, nxt], cov[nxt, cur]).T
            conds.append(
                GaussianConditional(G, mean[cur] - G @ mean[nxt], cov[cur, cur] - G @ cov[nxt, cur])
            )
        last = slice(T * d, (T + 1) * d)
        return VariationalChain(mean[last].copy(), cov[last, last].copy(), tuple(conds))


def chain_joint(q: VariationalChain) -> tuple[np.ndarray, np.ndarray]:
    """Joint Gaussian of (x_0, ..., x_T) generated backwards from the terminal law."""
    d = q.terminal_mean.size
    T = len(q.conditionals)
    mean = np.zeros((T + 1) * d)
    cov = np.zeros(((T + 1) * d,) * 2)
    last = slice(T * d, (T + 1) * d)
    mean[last] = q.terminal_mean
    cov[last, last] = q.terminal_cov
    for k in range(T - 1, -1, -1):
        c = q.conditionals[k]
        cur, nxt = slice(k * d, (k + 1) * d), slice((k + 1) * d, (k + 2) * d)
        later = slice((k + 1) * d, (T + 1) * d)
        mean[cur] = c.F @ mean[nxt] + c.b
        cov[cur, later] = c.F @ cov[nxt, later]
        cov[later, cur] = cov[cur, later].T
        cov[cur, cur] = c.F @ cov[nxt, nxt] @ c.F.T + c.S
    return mean, cov


def gaussian_kl(m_q, C_q, m_p, C_p) -> float:
    """``KL(N(m_q, C_q) || N(m_p, C_p))``."""
    n = m_q.size
    Lp = np.linalg.cholesky(C_p)
    Lq = np.linalg.cholesky(C_q)
    A = np.linalg.solve(Lp, Lq)
    u = np.linalg.solve(Lp, m_p - m_q)
    logdet = 2.0 * (np.log(np.diag(Lp)).sum() - np.log(np.diag(Lq)).sum())
    return 0.5 * (np.sum(A * A) + u @ u - n + logdet)


def expected_conditional_kl(q: GaussianConditional, p: GaussianConditional, m, P) -> float:
    """``E_{x ~ N(m, P)} KL(q(.|x) || p(.|x))`` in closed form."""
    d = q.b.size
    Lp = np.linalg.cholesky(p.S)
    Lq = np.linalg.cholesky(q.S)
    A = np.linalg.solve(Lp, Lq)
    D = q.F - p.F
    u = np.linalg.solve(Lp, D @ m + q.b - p.b)
    W = np.linalg.solve(Lp, D)
    spread = np.sum((W @ P) * W)  # tr(S_p^{-1} D P D^T)
    logdet = 2.0 * (np.log(np.diag(Lp)).sum() - np.log(np.diag(Lq)).sum())
    return 0.5 * (np.sum(A * A) + u @ u + spread - d + logdet)


@dataclass(frozen=True)
class KLCheck:
    joint: float
    decomposed: float
    terminal: float
    steps: np.ndarray  # per-step expected KLs, index k

    @property
    def gap(self) -> float:
        return abs(self.joint - self.decomposed)


def kl_decomposition_check(chain: ConjugateChain, q: VariationalChain) -> KLCheck:
    """Joint ``KL(q || p)`` over the whole chain versus terminal KL plus per-step expected KLs."""
    d, T = chain.d, chain.T
    if len(q.conditionals) != T or q.terminal_mean.shape != (d,):
        raise ValueError("variational chain does not match the conjugate chain's shape")
    p = chain.true_chain()
    mq, Cq = chain_joint(q)
    mp, Cp = chain_joint(p)
    joint = gaussian_kl(mq, Cq, mp, Cp)
    terminal = gaussian_kl(q.terminal_mean, q.terminal_cov, p.terminal_mean, p.terminal_cov)
    steps = np.empty(T)
    for k in range(T):
        nxt = slice((k + 1) * d, (k + 2) * d)
        steps[k] = expected_conditional_kl(q.conditionals[k], p.conditionals[k], mq[nxt], Cq[nxt, nxt])
    return KLCheck(joint, terminal + float(steps.sum()), terminal, steps)


def random_variational_chain(chain: ConjugateChain, rng: np.random.Generator, scale: float = 0.3) -> VariationalChain:
    """A valid but arbitrary chain near the true one (SPD covariances, random gains)."""
    p = chain.true_chain()
    d = chain.d

    def spd_like(S):
        B = rng.normal(scale=scale, size=(d, d))
        return S + scale * (B @ B.T) * np.mean(np.diag(S)) + 1e-3 * np.mean(np.diag(S)) * np.eye(d)

    conds = tuple(
        GaussianConditional(
            c.F + rng.normal(scale=scale, size=(d, d)),
            c.b + rng.normal(scale=scale, size=d),
            spd_like(c.S),
        )
        for c in p.conditionals
    )
    return VariationalChain(p.terminal_mean + rng.normal(scale=scale, size=d), spd_like(p.terminal_cov), conds)
