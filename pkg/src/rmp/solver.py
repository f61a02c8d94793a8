"""Reverse mean propagation by stochastic natural-gradient descent.

For each reverse step k = T-1..0 the variational Gaussian
``q_k = N(mu_k, Lambda_k^{-1} I)`` is fitted to ``p_k(x_k | x_{k+1}, y)`` with
``T_in`` NGD iterations, after which its mean becomes the anchor ``x_k`` for
the next step and the starting mean ``mu_{k-1}^{(0)}``.

The gradient of ``log p_k`` is assembled from the transition score, the
(optionally balanced) likelihood score and the prior score.  Precision is
either fixed by the closed-form limiting rules or learned with the
natural-gradient precision update, which needs Hessian traces.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .gmm import LinearGaussianMeasurement, Perturbation
from .guidance import BoundGuidance, GuidanceStrategy
from .models import CountingModel, as_score_model
from .rng import RNG_ID, make_rng
from .schedule import Schedule, VESchedule, VPSchedule


@dataclass(frozen=True, eq=False)
class RMPConfig:
    schedule: Schedule
    T_in: int = 1
    s1: float = 1.0
    L: int = 1
    T_s: int | None = None  # VE precision switch; None means T // 2
    precision_mode: str = "fixed"
    s2: float | None = None
    lambda_min: float = 1e-8
    guidance: GuidanceStrategy = field(default_factory=GuidanceStrategy)
    seed: int = 0
    x_T: np.ndarray | None = None  # None: draw from the stationary forward law
    mu_init: np.ndarray | None = None  # mu_{T-1}^{(0)}; None: x_T
    expectation: str = "sample"  # or "quadrature" (Gauss-Hermite, quad_order nodes per axis)
    quad_order: int = 8

    def __post_init__(self):
        T = self.schedule.T
        if T < 1 or self.T_in < 1 or self.L < 1:
            raise ValueError("T, T_in and L must all be >= 1")
        if not (self.s1 > 0 and math.isfinite(self.s1)):
            raise ValueError(f"s1 must be positive, got {self.s1}")
        if self.T_s is not None and not 0 <= self.T_s <= T:
            raise ValueError(f"T_s must lie in 0..{T}, got {self.T_s}")
        if self.precision_mode not in ("fixed", "learned"):
            raise ValueError(f"precision_mode must be 'fixed' or 'learned', got {self.precision_mode!r}")
        if self.precision_mode == "learned" and not (self.s2 is not None and self.s2 > 0):
            raise ValueError("learned precision needs s2 > 0")
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")
        if self.expectation not in ("sample", "quadrature"):
            raise ValueError(f"expectation must be 'sample' or 'quadrature', got {self.expectation!r}")
        if self.quad_order < 1:
            raise ValueError("quad_order must be >= 1")
        for name in ("x_T", "mu_init"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.atleast_1d(np.asarray(v, dtype=float)))

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def switch(self) -> int:
        return self.T // 2 if self.T_s is None else self.T_s


# -- closed-form pieces -----------------------------------------------------------


def fixed_precision_ve(s: VESchedule, k: int, T_s: int) -> float:
    """Inverse precision for VE: ``sigma_k^2 gap / sigma_{k+1}^2`` above the switch,
    ``gap = sigma_{k+1}^2 - sigma_k^2`` otherwise (and whenever sigma_k = 0)."""
    if not 0 <= k < s.T:
        raise IndexError(f"step {k} outside 0..{s.T - 1}")
    gap = s.sigma_sq[k + 1] - s.sigma_sq[k]
    if k > T_s and s.sigma_sq[k] > 0:
        return float(s.sigma_sq[k] * gap / s.sigma_sq[k + 1])
    return float(gap)


def fixed_precision_vp(s: VPSchedule, k: int) -> float:
    if not 0 <= k < s.T:
        raise IndexError(f"step {k} outside 0..{s.T - 1}")
    return float(s.betas[k + 1])


def fixed_precision(s: Schedule, k: int, T_s: int) -> float:
    if isinstance(s, VESchedule):
        return fixed_precision_ve(s, k, T_s)
    return fixed_precision_vp(s, k)


def transition_score(s: Schedule, k: int, x_next, x) -> np.ndarray:
    """``grad_{x_k} log p(x_{k+1} | x_k)``."""
    x_next = np.asarray(x_next, dtype=float)
    x = np.asarray(x, dtype=float)
    if isinstance(s, VESchedule):
        return (x_next - x) / (s.sigma_sq[k + 1] - s.sigma_sq[k])
    b = s.betas[k + 1]
    return math.sqrt(1.0 - b) / b * x_next - (1.0 - b) / b * x


def transition_log_density(s: Schedule, k: int, x_next, x) -> np.ndarray:
    x_next = np.asarray(x_next, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(s, VESchedule):
        mean, var = x, s.sigma_sq[k + 1] - s.sigma_sq[k]
    else:
        mean, var = math.sqrt(1.0 - s.betas[k + 1]) * x, s.betas[k + 1]
    d = x.shape[1]
    r = x_next - mean
    return -0.5 * d * math.log(2 * math.pi * var) - 0.5 * np.sum(r * r, axis=1) / var


def transition_hessian_trace(s: Schedule, k: int, d: int) -> float:
    if isinstance(s, VESchedule):
        return -d / float(s.sigma_sq[k + 1] - s.sigma_sq[k])
    b = s.betas[k + 1]
    return -d * (1.0 - b) / b


@dataclass
class GradientTerms:
    transition: np.ndarray
    prior: np.ndarray
    likelihood: np.ndarray
    gamma: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.transition + self.gamma[:, None] * self.likelihood + self.prior


def assemble_gradient(x_k, x_next, s: Schedule, k: int, model, guidance: BoundGuidance) -> GradientTerms:
    """Score of the reverse conditional at a batch of points ``x_k``."""
    xb = np.atleast_2d(np.asarray(x_k, dtype=float))
    p = s.perturbation(k)
    prior = np.atleast_2d(model.score(xb, p))
    lik = np.atleast_2d(guidance.score(xb, p, prior_score=prior))
    gamma = guidance.gamma(prior, lik)
    terms = GradientTerms(transition_score(s, k, x_next, xb), prior, lik, gamma)
    if not np.all(np.isfinite(terms.total)):
        raise FloatingPointError(f"non-finite gradient at step {k}")
    return terms


def ngd_mean_step(mu, lam_inv: float, grad_mean, s1: float) -> np.ndarray:
    out = np.asarray(mu, dtype=float) + s1 * lam_inv * np.asarray(grad_mean, dtype=float)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite mean update")
    return out


def ngd_precision_step(lam: float, trace_mean: float, s2: float, d: int, floor: float = 1e-8) -> float:
    """``Lambda - s2 (d Lambda + E[tr Hessian])``, clamped below at ``floor``."""
    if not math.isfinite(trace_mean):
        raise FloatingPointError("non-finite Hessian-trace estimate")
    return max(lam - s2 * (d * lam + trace_mean), floor)


def _quadrature(order: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * d), indexing="ij")
    wgrid = np.meshgrid(*([w] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    return nodes, weights


# -- run loop -------------------------------------------------------------------


@dataclass
class Trajectory:
    """One record per outer step, in processing order k = T-1, ..., 0."""

    ks: np.ndarray
    mu: np.ndarray  # mu_k^{(T_in)}
    mu_start: np.ndarray  # mu_k^{(0)}
    lambda_inv: np.ndarray
    norm_prior: np.ndarray
    norm_lik: np.ndarray
    gamma: np.ndarray
    nfe: np.ndarray  # cumulative
    x_T: np.ndarray
    T_in: int
    status: str = "ok"
    error: str | None = None
    rng: str = RNG_ID

    @property
    def mu0(self) -> np.ndarray | None:
        if self.status != "ok":
            return None
        return self.mu[-1]

    @property
    def total_nfe(self) -> int:
        return int(self.nfe[-1]) if self.nfe.size else 0

    def csv_header(self) -> list[str]:
        d = self.x_T.size
        return ["k", "i", *[f"mu{j}" for j in range(d)], "lambda_inv", "norm_prior_score",
                "norm_lik_score", "gamma", "nfe"]

    def csv_rows(self):
        for r in range(self.ks.size):
            yield [int(self.ks[r]), self.T_in, *map(float, self.mu[r]), float(self.lambda_inv[r]),
                   float(self.norm_prior[r]), float(self.norm_lik[r]), float(self.gamma[r]), int(self.nfe[r])]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        for row in self.csv_rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def _initial_anchor(cfg: RMPConfig, d: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.x_T is not None:
        if cfg.x_T.shape != (d,):
            raise ValueError(f"x_T must have shape ({d},), got {cfg.x_T.shape}")
        return cfg.x_T.copy()
    s = cfg.schedule
    std = s.sigmas[-1] if isinstance(s, VESchedule) else 1.0
    return std * rng.standard_normal(d)


def run_rmp(cfg: RMPConfig, model, meas: LinearGaussianMeasurement, y) -> Trajectory:
    """Run the double loop and return the full trajectory.

    A non-finite state stops the run; the partial trajectory comes back with
    ``status='aborted'`` and the error message.
    """
    counted = CountingModel(as_score_model(model))
    d = counted.d
    guide = BoundGuidance(cfg.guidance, counted, meas, y)
    s = cfg.schedule
    T = s.T
    rng = make_rng(cfg.seed)
    learned = cfg.precision_mode == "learned"
    if learned and not hasattr(counted, "hessian_trace"):
        raise TypeError("learned precision needs a model with hessian_trace(x, p)")

    x_T = _initial_anchor(cfg, d, rng)
    anchor = x_T.copy()
    mu = x_T.copy() if cfg.mu_init is None else cfg.mu_init.copy()
    if mu.shape != (d,):
        raise ValueError(f"mu_init must have shape ({d},)")
    if cfg.expectation == "quadrature":
        nodes, qweights = _quadrature(cfg.quad_order, d)

    rec = {name: [] for name in ("ks", "mu", "mu_start", "lambda_inv", "norm_prior", "norm_lik", "gamma", "nfe")}
    status, error = "ok", None
    try:
        for k in range(T - 1, -1, -1):
            p = s.perturbation(k)
            lam_inv = fixed_precision(s, k, cfg.switch)
            lam = 1.0 / lam_inv
            mu_start = mu.copy()
            for _ in range(cfg.T_in):
                if cfg.expectation == "sample":
                    z = rng.standard_normal((cfg.L, d))
                    w = np.full(cfg.L, 1.0 / cfg.L)
                else:
                    z, w = nodes, qweights
                xs = mu + math.sqrt(lam_inv) * z
                terms = assemble_gradient(xs, anchor, s, k, counted, guide)
                grad = w @ terms.total
                if learned:
                    tr = (
                        transition_hessian_trace(s, k, d)
                        + terms.gamma * guide.hessian_trace(xs, p)
                        + np.asarray(counted.hessian_trace(xs, p))
                    )
                    trace_mean = float(w @ tr)
                mu = ngd_mean_step(mu, lam_inv, grad, cfg.s1)
                if learned:
                    lam = ngd_precision_step(lam, trace_mean, cfg.s2, d, cfg.lambda_min)
                    lam_inv = 1.0 / lam
            anchor = mu.copy()
            rec["ks"].append(k)
            rec["mu"].append(mu.copy())
            rec["mu_start"].append(mu_start)
            rec["lambda_inv"].append(lam_inv)
            rec["norm_prior"].append(float(w @ np.linalg.norm(terms.prior, axis=1)))
            rec["norm_lik"].append(float(w @ np.linalg.norm(terms.likelihood, axis=1)))
            rec["gamma"].append(float(w @ terms.gamma))
            rec["nfe"].append(counted.nfe)
    except FloatingPointError as exc:
        status, error = "aborted", str(exc)

    def arr(name, shape_tail=()):
        vals = rec[name]
        return np.array(vals, dtype=float).reshape(len(vals), *shape_tail)

    return Trajectory(
        ks=np.array(rec["ks"], dtype=int),
        mu=arr("mu", (d,)),
        mu_start=arr("mu_start", (d,)),
        lambda_inv=arr("lambda_inv"),
        norm_prior=arr("norm_prior"),
        norm_lik=arr("norm_lik"),
        gamma=arr("gamma"),
        nfe=np.array(rec["nfe"], dtype=int),
        x_T=x_T,
        T_in=cfg.T_in,
        status=status,
        error=error,
    )
