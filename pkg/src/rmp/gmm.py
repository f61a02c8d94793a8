"""Exact Gaussian-mixture machinery under linear-Gaussian measurements.

All evaluation functions accept a single point of shape ``(d,)`` or a batch of
shape ``(n, d)`` and return matching shapes.  Mixture sums go through
log-sum-exp; the toy prior has component variance 0.04 and naive
exponentials underflow a few standard deviations from the means.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Perturbation:
    """Forward-kernel marginal ``x_k = scale * x_0 + sqrt(noise_var) * noise``.

    VE at level sigma has scale 1 and noise variance sigma^2; VP at level
    abar has scale sqrt(abar) and noise variance 1 - abar.
    """

    kind: str
    level: float

    def __post_init__(self):
        object.__setattr__(self, "level", float(self.level))
        if self.kind == "ve":
            if not (self.level >= 0 and math.isfinite(self.level)):
                raise ValueError(f"VE sigma must be >= 0, got {self.level}")
        elif self.kind == "vp":
            if not (0 < self.level <= 1):
                raise ValueError(f"VP alpha_bar must lie in (0, 1], got {self.level}")
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")

    @classmethod
    def ve(cls, sigma: float) -> "Perturbation":
        return cls("ve", sigma)

    @classmethod
    def vp(cls, alpha_bar: float) -> "Perturbation":
        return cls("vp", alpha_bar)

    @property
    def scale(self) -> float:
        return 1.0 if self.kind == "ve" else math.sqrt(self.level)

    @property
    def noise_var(self) -> float:
        return self.level**2 if self.kind == "ve" else 1.0 - self.level


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.ndim != 2 or xb.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return xb, single


def _normalize_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
    return w


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of isotropic components ``N(means[j], variances[j] * I)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = _normalize_weights(self.weights)
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        v = np.asarray(self.variances, dtype=float).reshape(-1)
        if mu.ndim != 2 or mu.shape[0] != w.size or v.size != w.size:
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(v <= 0) or not np.all(np.isfinite(v)) or not np.all(np.isfinite(mu)):
            raise ValueError("variances must be positive and all parameters finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", v)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def single(cls, mean, variance: float) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(np.ones(1), mean[None, :], np.array([variance]))

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def K(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        j = rng.choice(self.K, size=n, p=self.weights)
        return self.means[j] + np.sqrt(self.variances[j])[:, None] * rng.standard_normal((n, self.d))

    def to_full(self) -> "FullGaussianMixture":
        eye = np.eye(self.d)
        return FullGaussianMixture(self.weights, self.means, self.variances[:, None, None] * eye)

    def __eq__(self, other):
        return (
            isinstance(other, GaussianMixture)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.variances, other.variances)
        )


@dataclass(frozen=True, eq=False)
class LinearGaussianMeasurement:
    """``y = A x_0 + noise_std * w`` with ``w ~ N(0, I_M)``."""

    matrix: np.ndarray
    noise_std: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if A.ndim != 2 or not np.all(np.isfinite(A)):
            raise ValueError("measurement matrix must be a finite 2-D array")
        if not (self.noise_std > 0 and math.isfinite(self.noise_std)):
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")
        A = A.copy()
        A.setflags(write=False)
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @classmethod
    def scalar(cls, a: float, noise_std: float) -> "LinearGaussianMeasurement":
        return cls(np.array([[float(a)]]), noise_std)

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    @property
    def N(self) -> int:
        return self.matrix.shape[1]

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T

    def sample(self, x0, rng: np.random.Generator) -> np.ndarray:
        ax = self.apply(x0)
        return ax + self.noise_std * rng.standard_normal(ax.shape)

    def check(self, d: int, y=None) -> np.ndarray | None:
        if self.N != d:
            raise ValueError(f"measurement acts on dimension {self.N}, model has {d}")
        if y is None:
            return None
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (self.M,):
            raise ValueError(f"y must have shape ({self.M},), got {y.shape}")
        return y


def _log_resp(m: GaussianMixture, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-component log terms ``log w_j + log N_j(x)`` and their squared distances."""
    diff = xb[:, None, :] - m.means[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logc = np.log(m.weights) - 0.5 * m.d * (LOG_2PI + np.log(m.variances)) - 0.5 * sq / m.variances
    return logc, diff


def log_density(m: GaussianMixture, x) -> np.ndarray | float:
    xb, single = _as_batch(x, m.d)
    logc, _ = _log_resp(m, xb)
    out = logsumexp(logc, axis=1)
    return float(out[0]) if single else out


def responsibilities(m: GaussianMixture, x) -> np.ndarray:
    xb, single = _as_batch(x, m.d)
    logc, _ = _log_resp(m, xb)
    r = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    return r[0] if single else r


def _score_parts(m: GaussianMixture, xb: np.ndarray):
    logc, diff = _log_resp(m, xb)
    r = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    g = -diff / m.variances[None, :, None]  # per-component scores (n, K, d)
    s = np.einsum("nk,nkd->nd", r, g)
    return r, g, s


def score(m: GaussianMixture, x) -> np.ndarray:
    """Gradient of the mixture log-density: responsibility-weighted component scores."""
    xb, single = _as_batch(x, m.d)
    _, _, s = _score_parts(m, xb)
    return s[0] if single else s


def hessian(m: GaussianMixture, x) -> np.ndarray:
    """Hessian of the log-density, ``sum_j r_j (g_j g_j^T - I/v_j) - s s^T``."""
    xb, single = _as_batch(x, m.d)
    r, g, s = _score_parts(m, xb)
    outer = np.einsum("nk,nki,nkj->nij", r, g, g)
    diag = (r / m.variances[None, :]).sum(axis=1)
    H = outer - np.einsum("ni,nj->nij", s, s) - diag[:, None, None] * np.eye(m.d)
    return H[0] if single else H


def hessian_trace(m: GaussianMixture, x) -> np.ndarray | float:
    """Laplacian of the log-density, ``sum_j r_j (|g_j|^2 - d/v_j) - |s|^2``."""
    xb, single = _as_batch(x, m.d)
    r, g, s = _score_parts(m, xb)
    gsq = np.einsum("nkd,nkd->nk", g, g)
    tr = np.sum(r * (gsq - m.d / m.variances[None, :]), axis=1) - np.einsum("nd,nd->n", s, s)
    return float(tr[0]) if single else tr


def perturb(m: GaussianMixture, p: Perturbation) -> GaussianMixture:
    """Exact marginal of ``x_k`` when ``x_0`` follows ``m``."""
    return GaussianMixture(m.weights, p.scale * m.means, p.scale**2 * m.variances + p.noise_var)


def perturb_ve(m: GaussianMixture, sigma: float) -> GaussianMixture:
    return perturb(m, Perturbation.ve(sigma))


def perturb_vp(m: GaussianMixture, alpha_bar: float) -> GaussianMixture:
    return perturb(m, Perturbation.vp(alpha_bar))


def conditional_mean(m: GaussianMixture, p: Perturbation, x) -> np.ndarray:
    """``E[x_0 | x_k = x]`` from per-component Gaussian conditioning.

    Computed without touching any score; serves as the reference for the
    Tweedie estimators.
    """
    xb, single = _as_batch(x, m.d)
    r = responsibilities(perturb(m, p), xb)
    c, nv = p.scale, p.noise_var
    gain = c * m.variances / (c**2 * m.variances + nv)  # (K,)
    comp = m.means[None] + gain[None, :, None] * (xb[:, None, :] - c * m.means[None])
    out = np.einsum("nk,nkd->nd", r, comp)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class FullGaussianMixture:
    """Mixture of Gaussians with full SPD covariances."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = _normalize_weights(self.weights)
        mu = np.asarray(self.means, dtype=float)
        C = np.asarray(self.covariances, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        if C.ndim == 1:
            C = C[:, None, None]
        K, D = mu.shape
        if K != w.size or C.shape != (K, D, D):
            raise ValueError("weights, means and covariances disagree on shapes")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(C))):
            raise ValueError("mixture parameters must be finite")
        if not np.allclose(C, np.swapaxes(C, 1, 2), rtol=1e-10, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        if np.any(np.linalg.eigvalsh(C) <= 0):
            raise ValueError("covariances must be positive definite")
        for name, arr in (("weights", w), ("means", mu), ("covariances", C)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def K(self) -> int:
        return self.weights.size

    @cached_property
    def _chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.covariances)

    @cached_property
    def _precisions(self) -> np.ndarray:
        return np.linalg.inv(self.covariances)

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def covariance(self) -> np.ndarray:
        mbar = self.mean
        dev = self.means - mbar
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum(
            "k,ki,kj->ij", self.weights, dev, dev
        )

    def marginal(self, idx) -> "FullGaussianMixture":
        idx = np.asarray(idx)
        return FullGaussianMixture(
            self.weights, self.means[:, idx], self.covariances[:, idx[:, None], idx[None, :]]
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        j = rng.choice(self.K, size=n, p=self.weights)
        z = rng.standard_normal((n, self.d))
        return self.means[j] + np.einsum("nij,nj->ni", self._chol[j], z)


def _full_parts(m: FullGaussianMixture, xb: np.ndarray):
    diff = xb[:, None, :] - m.means[None]
    # solve L u = diff for each component
    L = m._chol
    u = np.stack([np.linalg.solve(L[j], diff[:, j, :].T).T for j in range(m.K)], axis=1)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    logc = np.log(m.weights) - 0.5 * (m.d * LOG_2PI + logdet) - 0.5 * np.einsum("nkd,nkd->nk", u, u)
    g = -np.einsum("kij,nkj->nki", m._precisions, diff)
    return logc, g


def full_log_density(m: FullGaussianMixture, x) -> np.ndarray | float:
    xb, single = _as_batch(x, m.d)
    logc, _ = _full_parts(m, xb)
    out = logsumexp(logc, axis=1)
    return float(out[0]) if single else out


def full_score(m: FullGaussianMixture, x) -> np.ndarray:
    xb, single = _as_batch(x, m.d)
    logc, g = _full_parts(m, xb)
    r = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    s = np.einsum("nk,nkd->nd", r, g)
    return s[0] if single else s


def full_hessian(m: FullGaussianMixture, x) -> np.ndarray:
    xb, single = _as_batch(x, m.d)
    logc, g = _full_parts(m, xb)
    r = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    s = np.einsum("nk,nkd->nd", r, g)
    H = (
        np.einsum("nk,nki,nkj->nij", r, g, g)
        - np.einsum("nk,kij->nij", r, m._precisions)
        - np.einsum("ni,nj->nij", s, s)
    )
    return H[0] if single else H


def joint_with_measurement(
    m: GaussianMixture, meas: LinearGaussianMeasurement, p: Perturbation
) -> FullGaussianMixture:
    """Joint law of ``(x_k, y)`` as a ``(d + M)``-dimensional mixture.

    Component j: x_0 ~ N(mu_j, v_j I), x_k = c x_0 + noise, y = A x_0 + eps w,
    giving blocks Cov(x_k) = (c^2 v_j + n) I, Cov(x_k, y) = c v_j A^T,
    Cov(y) = v_j A A^T + eps^2 I.
    """
    meas.check(m.d)
    A, c, nv = meas.matrix, p.scale, p.noise_var
    d, M = m.d, meas.M
    AAt = A @ A.T
    covs = np.empty((m.K, d + M, d + M))
    for j, v in enumerate(m.variances):
        covs[j, :d, :d] = (c * c * v + nv) * np.eye(d)
        covs[j, :d, d:] = c * v * A.T
        covs[j, d:, :d] = c * v * A
        covs[j, d:, d:] = v * AAt + meas.noise_std**2 * np.eye(M)
    means = np.concatenate([c * m.means, m.means @ A.T], axis=1)
    return FullGaussianMixture(m.weights, means, covs)


def posterior_mixture(m: GaussianMixture, meas: LinearGaussianMeasurement, y) -> FullGaussianMixture:
    """Exact posterior ``p(x_0 | y)``: per-component conjugate update, weights
    reweighted by the component evidences ``N(y; A mu_j, v_j A A^T + eps^2 I)``."""
    y = meas.check(m.d, y)
    A, eps2 = meas.matrix, meas.noise_std**2
    d, M = m.d, meas.M
    logw = np.empty(m.K)
    means = np.empty((m.K, d))
    covs = np.empty((m.K, d, d))
    for j in range(m.K):
        v, mu = m.variances[j], m.means[j]
        S = v * (A @ A.T) + eps2 * np.eye(M)
        L = np.linalg.cholesky(S)
        resid = y - A @ mu
        u = np.linalg.solve(L, resid)
        logw[j] = (
            np.log(m.weights[j])
            - 0.5 * (M * LOG_2PI + 2.0 * np.log(np.diag(L)).sum())
            - 0.5 * u @ u
        )
        Sinv_A = np.linalg.solve(S, A)  # (M, d)
        means[j] = mu + v * (Sinv_A.T @ resid)
        covs[j] = v * np.eye(d) - v * v * (A.T @ Sinv_A)
    w = np.exp(logw - logsumexp(logw))
    w = w / w.sum()
    return FullGaussianMixture(w, means, covs)
