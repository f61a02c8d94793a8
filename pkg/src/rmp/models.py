"""Score-model adapters used by the solver and the baselines.

A score model answers ``score(x, p)``: the gradient of ``log p(x_k)`` at noise
level ``p``.  Analytic models also expose ``hessian``, ``hessian_trace`` and
``log_density``; black-box models (e.g. a network) only need ``score``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import gmm
from .gmm import GaussianMixture, Perturbation


class MixtureScoreModel:
    """Exact perturbed-marginal scores of a Gaussian-mixture prior."""

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture
        self._cache: dict[tuple[str, float], GaussianMixture] = {}

    @property
    def d(self) -> int:
        return self.mixture.d

    def marginal(self, p: Perturbation) -> GaussianMixture:
        key = (p.kind, p.level)
        m = self._cache.get(key)
        if m is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            m = self._cache[key] = gmm.perturb(self.mixture, p)
        return m

    def score(self, x, p: Perturbation) -> np.ndarray:
        return gmm.score(self.marginal(p), x)

    def hessian(self, x, p: Perturbation) -> np.ndarray:
        return gmm.hessian(self.marginal(p), x)

    def hessian_trace(self, x, p: Perturbation):
        return gmm.hessian_trace(self.marginal(p), x)

    def log_density(self, x, p: Perturbation):
        return gmm.log_density(self.marginal(p), x)


class ScoreFunctionModel:
    """Wraps a bare ``fn(x, p) -> score`` callable."""

    def __init__(self, fn: Callable[[np.ndarray, Perturbation], np.ndarray], d: int):
        self.fn = fn
        self.d = d

    def score(self, x, p: Perturbation) -> np.ndarray:
        return np.asarray(self.fn(x, p), dtype=float)


class CountingModel:
    """Proxy that counts score evaluations, one per evaluated point."""

    def __init__(self, model):
        self._model = model
        self.nfe = 0

    def score(self, x, p: Perturbation) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self.nfe += 1 if x.ndim == 1 else x.shape[0]
        return self._model.score(x, p)

    def __getattr__(self, name):
        return getattr(self._model, name)


def as_score_model(model):
    if isinstance(model, GaussianMixture):
        return MixtureScoreModel(model)
    if not hasattr(model, "score"):
        raise TypeError(f"{type(model).__name__} does not provide score(x, p)")
    return model
