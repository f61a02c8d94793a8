"""Discrete VE / VP forward-process noise schedules.

Index 0 is always clean data: ``sigmas[0]`` is usually 0 for VE, and VP
schedules carry ``betas[0] == 0`` so that ``alpha_bars[0] == 1``.  A schedule
with ``T`` steps therefore stores ``T + 1`` entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gmm import Perturbation


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VESchedule:
    """Variance-exploding schedule ``sigma_0 < sigma_1 < ... < sigma_T``."""

    sigmas: np.ndarray
    kind: str = field(default="ve", init=False)

    def __post_init__(self):
        s = _frozen(self.sigmas)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("VE schedule needs at least sigma_0 and sigma_1")
        if not np.all(np.isfinite(s)):
            raise ValueError("VE sigmas must be finite")
        if s[0] < 0:
            raise ValueError("sigma_0 must be non-negative")
        if np.any(np.diff(s) <= 0):
            raise ValueError("VE sigmas must be strictly increasing")
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "sigma_sq", _frozen(s**2))

    @property
    def T(self) -> int:
        return self.sigmas.size - 1

    def _check(self, k: int) -> int:
        if not 0 <= k <= self.T:
            raise IndexError(f"step {k} outside 0..{self.T}")
        return int(k)

    def perturbation(self, k: int) -> Perturbation:
        return Perturbation.ve(self.sigmas[self._check(k)])

    def __eq__(self, other):
        return isinstance(other, VESchedule) and np.array_equal(self.sigmas, other.sigmas)

    def __hash__(self):
        return hash(("ve", self.sigmas.tobytes()))


@dataclass(frozen=True, eq=False)
class VPSchedule:
    """Variance-preserving schedule with ``betas[0] == 0``.

    ``alphas = 1 - betas`` and ``alpha_bars`` is the running product, built
    by sequential multiplication so ``alpha_bars[k] == alpha_bars[k-1] * alphas[k]``
    holds exactly.
    """

    betas: np.ndarray
    kind: str = field(default="vp", init=False)

    def __post_init__(self):
        b = _frozen(self.betas)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("VP schedule needs at least beta_0 and beta_1")
        if not np.all(np.isfinite(b)):
            raise ValueError("VP betas must be finite")
        if b[0] != 0.0:
            raise ValueError("beta_0 must be 0 (index 0 is clean data)")
        if np.any(b < 0) or np.any(b >= 1):
            raise ValueError("VP betas must lie in [0, 1)")
        if np.any(np.diff(b) <= 0):
            raise ValueError("VP betas must be strictly increasing")
        alphas = 1.0 - b
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", _frozen(alphas))
        object.__setattr__(self, "alpha_bars", _frozen(np.cumprod(alphas)))

    @property
    def T(self) -> int:
        return self.betas.size - 1

    def _check(self, k: int) -> int:
        if not 0 <= k <= self.T:
            raise IndexError(f"step {k} outside 0..{self.T}")
        return int(k)

    def perturbation(self, k: int) -> Perturbation:
        return Perturbation.vp(self.alpha_bars[self._check(k)])

    def __eq__(self, other):
        return isinstance(other, VPSchedule) and np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash(("vp", self.betas.tobytes()))


Schedule = VESchedule | VPSchedule


def ve_geometric(T: int, sigma_min: float, sigma_max: float) -> VESchedule:
    """Geometric VE schedule ``sigma_k = sigma_min (sigma_max/sigma_min)^((k-1)/(T-1))``
    for ``k = 1..T``, with ``sigma_0 = 0`` prepended."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0 < sigma_min < sigma_max) or not math.isfinite(sigma_max):
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    k = np.arange(1, T + 1)
    sig = sigma_min * (sigma_max / sigma_min) ** ((k - 1) / (T - 1))
    return VESchedule(np.concatenate([[0.0], sig]))


def vp_linear(T: int, beta_min: float, beta_max: float) -> VPSchedule:
    """Linear VP schedule ``beta_k = beta_min + (k-1)/(T-1) (beta_max - beta_min)``."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_min < beta_max < 1):
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    k = np.arange(1, T + 1)
    betas = beta_min + (k - 1) / (T - 1) * (beta_max - beta_min)
    return VPSchedule(np.concatenate([[0.0], betas]))


def vp_effective_sigma(s: VPSchedule, k: int) -> float:
    """Std of the VP perturbation kernel relative to the scaled signal, ``sqrt(1 - abar_k)``."""
    ab = s.alpha_bars[s._check(k)]
    return math.sqrt(max(0.0, 1.0 - ab))
