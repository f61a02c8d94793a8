"""The one-dimensional two-mode toy problem and its standard schedule."""
from __future__ import annotations

import numpy as np

from .gmm import GaussianMixture, LinearGaussianMeasurement
from .schedule import VPSchedule, vp_linear

TOY_MEANS = (-1.0, 1.0)
TOY_STD = 0.2
TOY_EPS = 0.5
TOY_A = 1.0
TOY_T = 1000
TOY_BETA = (1e-4, 0.02)
TOY_YS = (-1.5, -0.5, 0.2, 0.5, 1.5)


def toy_mixture() -> GaussianMixture:
    return GaussianMixture(
        np.array([0.5, 0.5]), np.array(TOY_MEANS, dtype=float)[:, None], np.full(2, TOY_STD**2)
    )


def toy_measurement() -> LinearGaussianMeasurement:
    return LinearGaussianMeasurement.scalar(TOY_A, TOY_EPS)


def toy_schedule(T: int = TOY_T) -> VPSchedule:
    return vp_linear(T, *TOY_BETA)
