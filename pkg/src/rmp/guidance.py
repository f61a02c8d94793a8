"""Likelihood-score strategies and Tweedie denoisers.

Three ways to get ``grad_{x_k} log p(y | x_k)``:

``exact``
    ``grad log p(x_k, y) - grad log p(x_k)`` from the exact joint mixture.
``prior_free``
    Gaussian ``p(y | x_k)`` obtained by inverting the forward kernel as if
    ``x_0`` had a flat prior.  Exact at zero noise, biased otherwise.
``dps``
    ``grad log N(y; A xhat_0(x_k), eps^2 I)`` with ``xhat_0`` the Tweedie estimate.

The balancing weight ``gamma = zeta |s| / |l|`` rescales the likelihood term
relative to the prior score; ``zeta=None`` disables balancing (gamma = 1).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import gmm
from .gmm import GaussianMixture, LinearGaussianMeasurement, Perturbation

KINDS = ("exact", "prior_free", "dps")


@dataclass(frozen=True)
class GuidanceStrategy:
    kind: str = "prior_free"
    zeta: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown guidance kind {self.kind!r}; choose from {KINDS}")
        if self.zeta is not None and not (self.zeta >= 0 and math.isfinite(self.zeta)):
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")


def tweedie(x, p: Perturbation, score_value) -> np.ndarray:
    """``E[x_0 | x_k]`` from the score of the perturbed marginal."""
    x = np.asarray(x, dtype=float)
    return (x + p.noise_var * np.asarray(score_value, dtype=float)) / p.scale


def tweedie_ve(x_k, sigma_k: float, score_value) -> np.ndarray:
    return tweedie(x_k, Perturbation.ve(sigma_k), score_value)


def tweedie_vp(x_k, alpha_bar_k: float, score_value) -> np.ndarray:
    return tweedie(x_k, Perturbation.vp(alpha_bar_k), score_value)


def _split_batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != d:
        raise ValueError(f"expected dimension {d}, got shape {x.shape}")
    return xb, single


# -- exact -----------------------------------------------------------------


def _joint_points(xb, y):
    return np.concatenate([xb, np.broadcast_to(y, (xb.shape[0], y.size))], axis=1)


def loglik_exact(model: GaussianMixture, meas: LinearGaussianMeasurement, y, p: Perturbation, x_k, joint=None):
    """``log p(y | x_k)`` under the mixture prior."""
    y = meas.check(model.d, y)
    xb, single = _split_batch(x_k, model.d)
    joint = joint if joint is not None else gmm.joint_with_measurement(model, meas, p)
    out = gmm.full_log_density(joint, _joint_points(xb, y)) - gmm.log_density(gmm.perturb(model, p), xb)
    return float(out[0]) if single else out


def likelihood_score_exact(
    model: GaussianMixture, meas: LinearGaussianMeasurement, y, p: Perturbation, x_k, joint=None
) -> np.ndarray:
    y = meas.check(model.d, y)
    xb, single = _split_batch(x_k, model.d)
    joint = joint if joint is not None else gmm.joint_with_measurement(model, meas, p)
    s = gmm.full_score(joint, _joint_points(xb, y))[:, : model.d] - gmm.score(gmm.perturb(model, p), xb)
    return s[0] if single else s


def likelihood_hessian_trace_exact(
    model: GaussianMixture, meas: LinearGaussianMeasurement, y, p: Perturbation, x_k, joint=None
):
    y = meas.check(model.d, y)
    xb, single = _split_batch(x_k, model.d)
    joint = joint if joint is not None else gmm.joint_with_measurement(model, meas, p)
    H = gmm.full_hessian(joint, _joint_points(xb, y))[:, : model.d, : model.d]
    tr = np.trace(H, axis1=1, axis2=2) - gmm.hessian_trace(gmm.perturb(model, p), xb)
    return float(tr[0]) if single else tr


# -- prior-free --------------------------------------------------------------


def _prior_free_cov(meas: LinearGaussianMeasurement, p: Perturbation) -> np.ndarray:
    A = meas.matrix
    return (p.noise_var / p.scale**2) * (A @ A.T) + meas.noise_std**2 * np.eye(meas.M)


def loglik_prior_free(meas: LinearGaussianMeasurement, p: Perturbation, x_k, y):
    """``log N(y; A x_k / c, (n / c^2) A A^T + eps^2 I)`` with c, n the kernel scale and noise."""
    y = meas.check(meas.N, y)
    xb, single = _split_batch(x_k, meas.N)
    S = _prior_free_cov(meas, p)
    L = np.linalg.cholesky(S)
    r = y[None, :] - xb @ meas.matrix.T / p.scale
    u = np.linalg.solve(L, r.T)
    out = -0.5 * (meas.M * gmm.LOG_2PI + 2.0 * np.log(np.diag(L)).sum()) - 0.5 * np.sum(u * u, axis=0)
    return float(out[0]) if single else out


def likelihood_score_prior_free(meas: LinearGaussianMeasurement, p: Perturbation, x_k, y) -> np.ndarray:
    y = meas.check(meas.N, y)
    xb, single = _split_batch(x_k, meas.N)
    S = _prior_free_cov(meas, p)
    r = y[None, :] - xb @ meas.matrix.T / p.scale
    s = np.linalg.solve(S, r.T).T @ meas.matrix / p.scale
    return s[0] if single else s


def likelihood_hessian_trace_prior_free(meas: LinearGaussianMeasurement, p: Perturbation) -> float:
    """Constant Laplacian of the prior-free log-likelihood."""
    S = _prior_free_cov(meas, p)
    A = meas.matrix
    return -float(np.trace(A.T @ np.linalg.solve(S, A))) / p.scale**2


# -- DPS -----------------------------------------------------------------------


def loglik_dps(score_fn, meas: LinearGaussianMeasurement, p: Perturbation, x_k, y):
    """``-|y - A xhat_0(x_k)|^2 / (2 eps^2)`` (constant terms dropped)."""
    y = meas.check(meas.N, y)
    xb, single = _split_batch(x_k, meas.N)
    xhat = tweedie(xb, p, score_fn(xb, p))
    r = y[None, :] - xhat @ meas.matrix.T
    out = -0.5 * np.sum(r * r, axis=1) / meas.noise_std**2
    return float(out[0]) if single else out


def _tweedie_jacobian_fd(score_fn, p: Perturbation, xb: np.ndarray) -> np.ndarray:
    """Columns of d xhat_0 / d x_k by central differences; costs 2d score calls per point."""
    n, d = xb.shape
    h = 1e-4 * (1.0 + np.linalg.norm(xb, axis=1))
    J = np.empty((n, d, d))
    for i in range(d):
        step = np.zeros((n, d))
        step[:, i] = h
        fp = tweedie(xb + step, p, score_fn(xb + step, p))
        fm = tweedie(xb - step, p, score_fn(xb - step, p))
        J[:, :, i] = (fp - fm) / (2.0 * h[:, None])
    return J


def likelihood_score_dps(
    score_fn, meas: LinearGaussianMeasurement, p: Perturbation, x_k, y, hessian_fn=None, prior_score=None
) -> np.ndarray:
    """Gradient of the DPS surrogate by the chain rule through Tweedie.

    With ``hessian_fn`` the Jacobian is ``(I + n H) / c`` exactly; otherwise it
    is estimated by central finite differences of the score.  ``prior_score``
    may pass an already computed score at ``x_k`` to save one evaluation.
    """
    y = meas.check(meas.N, y)
    xb, single = _split_batch(x_k, meas.N)
    s = score_fn(xb, p) if prior_score is None else np.atleast_2d(prior_score)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("score function returned non-finite values")
    xhat = tweedie(xb, p, s)
    r = (y[None, :] - xhat @ meas.matrix.T) @ meas.matrix / meas.noise_std**2  # A^T (y - A xhat) / eps^2
    if hessian_fn is not None:
        H = np.atleast_3d(hessian_fn(xb, p)).reshape(xb.shape[0], meas.N, meas.N)
        J = (np.eye(meas.N)[None] + p.noise_var * H) / p.scale
    else:
        J = _tweedie_jacobian_fd(score_fn, p, xb)
    out = np.einsum("nij,ni->nj", J, r)
    return out[0] if single else out


# -- balancing -------------------------------------------------------------------


def gamma_balance(zeta: float, prior_score, likelihood_score):
    """``zeta |prior_score| / |likelihood_score|``, row-wise for batches.

    A zero likelihood score gives gamma = 0 (with a warning) instead of NaN.
    """
    s = np.asarray(prior_score, dtype=float)
    ell = np.asarray(likelihood_score, dtype=float)
    ns = np.linalg.norm(np.atleast_2d(s), axis=1)
    nl = np.linalg.norm(np.atleast_2d(ell), axis=1)
    zero = nl == 0
    if np.any(zero):
        warnings.warn("zero likelihood-score norm; using gamma = 0", RuntimeWarning, stacklevel=2)
    g = np.where(zero, 0.0, zeta * ns / np.where(zero, 1.0, nl))
    return float(g[0]) if s.ndim == 1 else g


class BoundGuidance:
    """A strategy bound to (model, measurement, y), with per-level caches."""

    def __init__(self, strategy: GuidanceStrategy, model, meas: LinearGaussianMeasurement, y):
        self.strategy = strategy
        self.model = model
        self.meas = meas
        self.y = meas.check(model.d, y)
        self._level = None
        self._joint = None
        if strategy.kind == "exact" and not hasattr(model, "mixture"):
            raise TypeError("exact guidance requires an analytic mixture model")

    def _joint_at(self, p: Perturbation):
        if self._level != p:
            self._joint = gmm.joint_with_measurement(self.model.mixture, self.meas, p)
            self._level = p
        return self._joint

    def score(self, x, p: Perturbation, prior_score=None) -> np.ndarray:
        kind = self.strategy.kind
        if kind == "exact":
            return likelihood_score_exact(self.model.mixture, self.meas, self.y, p, x, joint=self._joint_at(p))
        if kind == "prior_free":
            return likelihood_score_prior_free(self.meas, p, x, self.y)
        return likelihood_score_dps(
            self.model.score, self.meas, p, x, self.y,
            hessian_fn=getattr(self.model, "hessian", None), prior_score=prior_score,
        )

    def log_likelihood(self, x, p: Perturbation):
        kind = self.strategy.kind
        if kind == "exact":
            return loglik_exact(self.model.mixture, self.meas, self.y, p, x, joint=self._joint_at(p))
        if kind == "prior_free":
            return loglik_prior_free(self.meas, p, x, self.y)
        return loglik_dps(self.model.score, self.meas, p, x, self.y)

    def hessian_trace(self, x, p: Perturbation) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        kind = self.strategy.kind
        if kind == "exact":
            return np.atleast_1d(
                likelihood_hessian_trace_exact(self.model.mixture, self.meas, self.y, p, xb, joint=self._joint_at(p))
            )
        if kind == "prior_free":
            return np.full(xb.shape[0], likelihood_hessian_trace_prior_free(self.meas, p))
        # DPS: divergence of the gradient field by central differences
        n, d = xb.shape
        h = 1e-4 * (1.0 + np.linalg.norm(xb, axis=1))
        tr = np.zeros(n)
        for i in range(d):
            step = np.zeros((n, d))
            step[:, i] = h
            gp = self.score(xb + step, p)
            gm = self.score(xb - step, p)
            tr += (gp[:, i] - gm[:, i]) / (2.0 * h)
        return tr

    def gamma(self, prior_score, lik_score):
        if self.strategy.zeta is None:
            return np.ones(np.atleast_2d(lik_score).shape[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.atleast_1d(gamma_balance(self.strategy.zeta, prior_score, lik_score))
