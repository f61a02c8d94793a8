"""Sampling baseline: guided ancestral sampling and posterior means by averaging.

The sampler follows the usual DDPM/DPS convention: starting from
``x_T ~ N(0, I)``, each step applies

    x_k = (x_{k+1} + beta_{k+1} (s(x_{k+1}) + gamma * l(x_{k+1}))) / sqrt(alpha_{k+1}) + sqrt(beta_{k+1}) z

with scores taken at level k+1 and no noise on the final step.  Each run owns
its own random stream derived from (seed, run index), so a batch of runs gives
the same numbers as running them one at a time.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gmm import GaussianMixture, LinearGaussianMeasurement
from .guidance import BoundGuidance, GuidanceStrategy
from .models import CountingModel, as_score_model
from .oracle import posterior_mean_closed_form
from .rng import make_rng
from .schedule import VPSchedule, vp_linear
from .solver import RMPConfig, run_rmp

_CHUNK = 2048


@dataclass(frozen=True)
class SampleBatch:
    samples: np.ndarray  # (n, d)
    nfe: int


def _run_noise(seed: int, runs: range, T: int, d: int) -> np.ndarray:
    # row 0 is x_T, row T - k is the noise added on the way to x_k
    return np.stack([make_rng(seed, r).standard_normal((T + 1, d)) for r in runs])


def _ancestral(s: VPSchedule, model: CountingModel, guide: BoundGuidance, noise: np.ndarray) -> np.ndarray:
    x = noise[:, 0, :].copy()
    T = s.T
    for k in range(T - 1, -1, -1):
        p = s.perturbation(k + 1)
        sc = np.atleast_2d(model.score(x, p))
        lik = np.atleast_2d(guide.score(x, p, prior_score=sc))
        g = guide.gamma(sc, lik)
        b = s.betas[k + 1]
        x = (x + b * (sc + g[:, None] * lik)) / math.sqrt(1.0 - b)
        if k > 0:
            x = x + math.sqrt(b) * noise[:, T - k, :]
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"ancestral sampler diverged at step {k}")
    return x


def sample_posterior(
    s: VPSchedule,
    model,
    meas: LinearGaussianMeasurement,
    y,
    guidance: GuidanceStrategy = GuidanceStrategy(),
    seed: int = 0,
    n: int = 1,
    first_run: int = 0,
) -> SampleBatch:
    """Runs ``first_run .. first_run + n - 1`` of the sampler; nfe counts every score evaluation."""
    if not isinstance(s, VPSchedule):
        raise TypeError("the ancestral baseline is implemented for VP schedules only")
    if n < 1:
        raise ValueError("n must be >= 1")
    counted = CountingModel(as_score_model(model))
    guide = BoundGuidance(guidance, counted, meas, y)
    out = []
    for start in range(first_run, first_run + n, _CHUNK):
        runs = range(start, min(start + _CHUNK, first_run + n))
        out.append(_ancestral(s, counted, guide, _run_noise(seed, runs, s.T, counted.d)))
    return SampleBatch(np.concatenate(out), counted.nfe)


def guided_ancestral_sample(
    s: VPSchedule, model, meas: LinearGaussianMeasurement, y, guidance: GuidanceStrategy = GuidanceStrategy(),
    seed: int = 0, run_index: int = 0,
) -> tuple[np.ndarray, int]:
    batch = sample_posterior(s, model, meas, y, guidance, seed, n=1, first_run=run_index)
    return batch.samples[0], batch.nfe


@dataclass(frozen=True)
class AveragingResult:
    mean: np.ndarray
    stderr: np.ndarray  # NaN for a single run
    nfe: int
    samples: np.ndarray


def posterior_mean_by_averaging(
    n_runs: int, s: VPSchedule, model, meas: LinearGaussianMeasurement, y,
    guidance: GuidanceStrategy = GuidanceStrategy(), seed: int = 0,
) -> AveragingResult:
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    batch = sample_posterior(s, model, meas, y, guidance, seed, n=n_runs)
    x = batch.samples
    se = x.std(axis=0, ddof=1) / math.sqrt(n_runs) if n_runs > 1 else np.full(x.shape[1], np.nan)
    return AveragingResult(x.mean(axis=0), se, batch.nfe, x)


# -- NFE frontier ----------------------------------------------------------------


@dataclass(frozen=True)
class FrontierProblem:
    """Toy problem and allocation rules for the NFE comparison.

    Both methods use a VP schedule with ``T_pass`` steps and discrete betas
    ``beta_ct / T_pass`` (so the terminal alpha_bar does not depend on T_pass).
    At budget B, RMP draws ``L = B // T_pass`` samples per gradient and the
    baseline averages ``B // T_pass`` sampler runs.
    """

    model: GaussianMixture
    meas: LinearGaussianMeasurement
    ys: tuple = (-1.5, -0.5, 0.2, 0.5, 1.5)
    seeds: tuple = (0, 1, 2, 3, 4)
    T_pass: int = 400
    beta_ct: tuple[float, float] = (0.1, 20.0)
    guidance: GuidanceStrategy = field(default_factory=GuidanceStrategy)

    def schedule(self) -> VPSchedule:
        return vp_linear(self.T_pass, self.beta_ct[0] / self.T_pass, self.beta_ct[1] / self.T_pass)


@dataclass(frozen=True)
class FrontierRow:
    method: str
    budget: int
    nfe: int
    y: float
    seed: int
    sq_error: float


METHODS = ("rmp", "averaging")


def _task_seed(seed: int, yi: int, budget: int) -> int:
    return int(np.random.SeedSequence([seed, yi, budget]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _frontier_task(problem: FrontierProblem, s: VPSchedule, method: str, budget: int, yi: int, seed: int, oracle):
    y = problem.meas.check(problem.model.d, problem.ys[yi])
    reps = budget // problem.T_pass
    tseed = _task_seed(seed, yi, budget)
    if method == "rmp":
        cfg = RMPConfig(s, L=reps, guidance=problem.guidance, seed=tseed)
        tr = run_rmp(cfg, problem.model, problem.meas, y)
        if tr.status != "ok":
            raise FloatingPointError(tr.error)
        est, nfe = tr.mu0, tr.total_nfe
    else:
        res = posterior_mean_by_averaging(reps, s, problem.model, problem.meas, y, problem.guidance, tseed)
        est, nfe = res.mean, res.nfe
    err = float(np.sum((est - oracle[yi]) ** 2))
    return FrontierRow(method, budget, nfe, float(np.ravel(y)[0]) if y.size == 1 else float("nan"), seed, err)


def nfe_frontier(problem: FrontierProblem, budgets, methods=METHODS, threads: int = 1) -> list[FrontierRow]:
    budgets = [int(b) for b in budgets]
    for b in budgets:
        if b < problem.T_pass:
            raise ValueError(f"budget {b} is below one full pass of {problem.T_pass} evaluations")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    s = problem.schedule()
    oracle = [posterior_mean_closed_form(problem.model, problem.meas, y) for y in problem.ys]
    tasks = [(m, b, yi, seed) for m in methods for b in budgets for yi in range(len(problem.ys)) for seed in problem.seeds]

    def run(t):
        return _frontier_task(problem, s, *t, oracle)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, tasks))
    return [run(t) for t in tasks]


def frontier_medians(rows: list[FrontierRow]) -> dict[tuple[str, int], float]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r.method, r.budget), []).append(r.sq_error)
    return {k: float(np.median(v)) for k, v in sorted(groups.items())}


def frontier_csv(rows: list[FrontierRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "budget", "nfe", "y", "seed", "sq_error"])
    for r in rows:
        w.writerow([r.method, r.budget, r.nfe, repr(r.y), r.seed, repr(r.sq_error)])
    return buf.getvalue()
