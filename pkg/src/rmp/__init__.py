"""Reverse mean propagation for posterior-mean estimation on tractable models."""
from .gmm import GaussianMixture, LinearGaussianMeasurement, Perturbation
from .guidance import GuidanceStrategy
from .reverse import PosteriorStats, exact_rmp_chain, endpoint_mean
from .schedule import VESchedule, VPSchedule, ve_geometric, vp_linear
from .solver import RMPConfig, Trajectory, run_rmp

__all__ = [
    "GaussianMixture",
    "LinearGaussianMeasurement",
    "Perturbation",
    "GuidanceStrategy",
    "PosteriorStats",
    "exact_rmp_chain",
    "endpoint_mean",
    "VESchedule",
    "VPSchedule",
    "ve_geometric",
    "vp_linear",
    "RMPConfig",
    "Trajectory",
    "run_rmp",
]
