"""JSON experiment configs with strict key checking.

Every section is a dataclass; ``from_dict`` rejects unknown keys and reports
the dotted path of the offending entry, and ``to_dict`` writes back a dict
that parses to an identical config.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .gmm import GaussianMixture, LinearGaussianMeasurement
from .guidance import KINDS, GuidanceStrategy
from .schedule import Schedule, VESchedule, VPSchedule, ve_geometric, vp_linear
from .solver import RMPConfig

EXPERIMENTS = ("run", "figures", "sweep", "frontier", "check")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def _keys(data: Any, cls, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return data


def _num(data: dict, key: str, path: str, default=None, *, integer=False, optional=False):
    if key not in data:
        if default is None and not optional:
            raise ConfigError(f"{path}.{key}", "missing required value")
        return default
    v = data[key]
    if v is None and optional:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if integer:
        if int(v) != v:
            raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
        return int(v)
    if not math.isfinite(v):
        raise ConfigError(f"{path}.{key}", "must be finite")
    return float(v)


def _vec(v, path: str, ndim: int = 1) -> list:
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a numeric array, got {v!r}") from None
    if arr.ndim != ndim or not np.all(np.isfinite(arr)):
        raise ConfigError(path, f"expected a finite {ndim}-D array")
    return arr.tolist()


def _choice(data: dict, key: str, path: str, options, default):
    v = data.get(key, default)
    if v not in options:
        raise ConfigError(f"{path}.{key}", f"must be one of {list(options)}, got {v!r}")
    return v


def _wrap(path: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


@dataclass(frozen=True)
class ModelSpec:
    weights: list
    means: list  # K x d
    variances: list

    @classmethod
    def from_dict(cls, data, path="model"):
        _keys(data, cls, path)
        for k in ("weights", "means", "variances"):
            if k not in data:
                raise ConfigError(f"{path}.{k}", "missing required value")
        spec = cls(_vec(data["weights"], f"{path}.weights"), _vec(data["means"], f"{path}.means", 2),
                   _vec(data["variances"], f"{path}.variances"))
        _wrap(path, spec.build)
        return spec

    def build(self) -> GaussianMixture:
        return GaussianMixture(np.array(self.weights), np.array(self.means), np.array(self.variances))


@dataclass(frozen=True)
class MeasurementSpec:
    matrix: list
    noise_std: float
    y: list | None = None

    @classmethod
    def from_dict(cls, data, path="measurement"):
        _keys(data, cls, path)
        if "matrix" not in data:
            raise ConfigError(f"{path}.matrix", "missing required value")
        y = data.get("y")
        noise_std = _num(data, "noise_std", path)
        if not noise_std > 0:
            raise ConfigError(f"{path}.noise_std", f"must be positive, got {noise_std}")
        spec = cls(
            _vec(data["matrix"], f"{path}.matrix", 2),
            noise_std,
            None if y is None else _vec(y, f"{path}.y"),
        )
        meas = _wrap(path, spec.build)
        if spec.y is not None:
            _wrap(f"{path}.y", lambda: meas.check(meas.N, spec.y))
        return spec

    def build(self) -> LinearGaussianMeasurement:
        return LinearGaussianMeasurement(np.array(self.matrix), self.noise_std)


@dataclass(frozen=True)
class DiffusionSpec:
    type: str = "vp"
    T: int = 1000
    beta_min: float | None = None
    beta_max: float | None = None
    sigma_min: float | None = None
    sigma_max: float | None = None

    @classmethod
    def from_dict(cls, data, path="diffusion"):
        _keys(data, cls, path)
        kind = _choice(data, "type", path, ("ve", "vp"), "vp")
        T = _num(data, "T", path, 1000, integer=True)
        if kind == "vp":
            for k in ("sigma_min", "sigma_max"):
                if data.get(k) is not None:
                    raise ConfigError(f"{path}.{k}", "only valid for type 've'")
            spec = cls(kind, T, _num(data, "beta_min", path, 1e-4), _num(data, "beta_max", path, 0.02))
        else:
            for k in ("beta_min", "beta_max"):
                if data.get(k) is not None:
                    raise ConfigError(f"{path}.{k}", "only valid for type 'vp'")
            spec = cls(kind, T, sigma_min=_num(data, "sigma_min", path, 0.01), sigma_max=_num(data, "sigma_max", path, 50.0))
        _wrap(path, spec.build)
        return spec

    def build(self) -> Schedule:
        if self.type == "vp":
            return vp_linear(self.T, self.beta_min, self.beta_max)
        return ve_geometric(self.T, self.sigma_min, self.sigma_max)


@dataclass(frozen=True)
class SolverSpec:
    T_in: int = 1
    s1: float = 1.0
    L: int = 1
    T_s: int | None = None
    precision_mode: str = "fixed"
    s2: float | None = None
    lambda_min: float = 1e-8
    guidance: str = "prior_free"
    zeta: float | None = None
    x_T: list | None = None
    mu_init: list | None = None
    expectation: str = "sample"
    quad_order: int = 8

    @classmethod
    def from_dict(cls, data, path="solver"):
        _keys(data, cls, path)
        return cls(
            T_in=_num(data, "T_in", path, 1, integer=True),
            s1=_num(data, "s1", path, 1.0),
            L=_num(data, "L", path, 1, integer=True),
            T_s=_num(data, "T_s", path, integer=True, optional=True),
            precision_mode=_choice(data, "precision_mode", path, ("fixed", "learned"), "fixed"),
            s2=_num(data, "s2", path, optional=True),
            lambda_min=_num(data, "lambda_min", path, 1e-8),
            guidance=_choice(data, "guidance", path, KINDS, "prior_free"),
            zeta=_num(data, "zeta", path, optional=True),
            x_T=None if data.get("x_T") is None else _vec(data["x_T"], f"{path}.x_T"),
            mu_init=None if data.get("mu_init") is None else _vec(data["mu_init"], f"{path}.mu_init"),
            expectation=_choice(data, "expectation", path, ("sample", "quadrature"), "sample"),
            quad_order=_num(data, "quad_order", path, 8, integer=True),
        )

    def strategy(self) -> GuidanceStrategy:
        return GuidanceStrategy(self.guidance, self.zeta)

    def build(self, schedule: Schedule, seed: int, **override) -> RMPConfig:
        kw = dict(
            T_in=self.T_in, s1=self.s1, L=self.L, T_s=self.T_s, precision_mode=self.precision_mode,
            s2=self.s2, lambda_min=self.lambda_min, guidance=self.strategy(), seed=seed,
            x_T=None if self.x_T is None else np.array(self.x_T),
            mu_init=None if self.mu_init is None else np.array(self.mu_init),
            expectation=self.expectation, quad_order=self.quad_order,
        )
        kw.update(override)
        return RMPConfig(schedule, **kw)


@dataclass(frozen=True)
class FiguresSpec:
    y_sweep: list = field(default_factory=lambda: [-1.5, -0.5, 0.2, 0.5, 1.5])
    random_x_T: int = 20
    panel_b_y: float = 0.2
    pairs: list = field(default_factory=lambda: [[-1.0, -1.5], [0.0, 0.2], [1.0, 1.5]])
    grid: list = field(default_factory=lambda: [-2.0, 2.0, 41])  # start, stop, count

    @classmethod
    def from_dict(cls, data, path="figures"):
        _keys(data, cls, path)
        d = cls()
        grid = _vec(data.get("grid", d.grid), f"{path}.grid")
        if len(grid) != 3 or grid[2] < 2 or int(grid[2]) != grid[2] or not grid[0] < grid[1]:
            raise ConfigError(f"{path}.grid", "expected [start, stop, count] with start < stop and count >= 2")
        pairs = _vec(data.get("pairs", d.pairs), f"{path}.pairs", 2)
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"{path}.pairs", "each pair is [x_T, y]")
        return cls(
            y_sweep=_vec(data.get("y_sweep", d.y_sweep), f"{path}.y_sweep"),
            random_x_T=_num(data, "random_x_T", path, d.random_x_T, integer=True),
            panel_b_y=_num(data, "panel_b_y", path, d.panel_b_y),
            pairs=pairs,
            grid=[grid[0], grid[1], int(grid[2])],
        )


@dataclass(frozen=True)
class SweepSpec:
    ys: list = field(default_factory=lambda: np.linspace(-2.0, 2.0, 20).tolist())
    importance_n: int = 1_000_000

    @classmethod
    def from_dict(cls, data, path="sweep"):
        _keys(data, cls, path)
        d = cls()
        n = _num(data, "importance_n", path, d.importance_n, integer=True)
        if n < 10_000:
            raise ConfigError(f"{path}.importance_n", "must be >= 10000")
        return cls(_vec(data.get("ys", d.ys), f"{path}.ys"), n)


@dataclass(frozen=True)
class FrontierSpec:
    budgets: list = field(default_factory=lambda: [400, 1600, 6400])
    ys: list = field(default_factory=lambda: [-1.5, -0.5, 0.2, 0.5, 1.5])
    T_pass: int = 400
    beta_ct: list = field(default_factory=lambda: [0.1, 20.0])

    @classmethod
    def from_dict(cls, data, path="frontier"):
        _keys(data, cls, path)
        d = cls()
        budgets = _vec(data.get("budgets", d.budgets), f"{path}.budgets")
        if any(int(b) != b for b in budgets):
            raise ConfigError(f"{path}.budgets", "budgets must be integers")
        beta = _vec(data.get("beta_ct", d.beta_ct), f"{path}.beta_ct")
        if len(beta) != 2:
            raise ConfigError(f"{path}.beta_ct", "expected [beta_min, beta_max]")
        return cls([int(b) for b in budgets], _vec(data.get("ys", d.ys), f"{path}.ys"),
                   _num(data, "T_pass", path, d.T_pass, integer=True), beta)


@dataclass(frozen=True)
class CheckSpec:
    suites: list = field(default_factory=lambda: ["acceptance"])

    @classmethod
    def from_dict(cls, data, path="check"):
        _keys(data, cls, path)
        suites = data.get("suites", cls().suites)
        if not isinstance(suites, list) or not all(isinstance(s, str) for s in suites):
            raise ConfigError(f"{path}.suites", "expected a list of suite names")
        return cls(list(suites))


_SECTIONS = {
    "figures": FiguresSpec,
    "sweep": SweepSpec,
    "frontier": FrontierSpec,
    "check": CheckSpec,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: ModelSpec
    measurement: MeasurementSpec
    diffusion: DiffusionSpec = field(default_factory=DiffusionSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = None
    figures: FiguresSpec | None = None
    sweep: SweepSpec | None = None
    frontier: FrontierSpec | None = None
    check: CheckSpec | None = None

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        _keys(data, cls, "$")
        exp = _choice(data, "experiment", "$", EXPERIMENTS, None)
        for k in ("model", "measurement"):
            if k not in data:
                raise ConfigError(f"$.{k}", "missing required section")
        model = ModelSpec.from_dict(data["model"], "$.model")
        meas = MeasurementSpec.from_dict(data["measurement"], "$.measurement")
        if len(model.means[0]) != len(meas.matrix[0]):
            raise ConfigError("$.measurement.matrix", f"acts on dimension {len(meas.matrix[0])}, model has {len(model.means[0])}")
        seeds = data.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise ConfigError("$.seeds", "expected a non-empty list of non-negative integers")
        out = data.get("output_dir")
        if out is not None and not isinstance(out, str):
            raise ConfigError("$.output_dir", "expected a string")
        sections = {}
        for name, spec in _SECTIONS.items():
            if name in data and data[name] is not None:
                sections[name] = spec.from_dict(data[name], f"$.{name}")
            elif name == exp:
                sections[name] = spec()
        solver = SolverSpec.from_dict(data.get("solver", {}), "$.solver")
        diffusion = DiffusionSpec.from_dict(data.get("diffusion", {}), "$.diffusion")
        cfg = cls(exp, model, meas, diffusion, solver, list(seeds), out, **sections)
        _wrap("$.solver", lambda: cfg.rmp_config(cfg.seeds[0]))
        if exp == "run" and meas.y is None:
            raise ConfigError("$.measurement.y", "a run needs an observation y")
        return cfg

    def to_dict(self) -> dict:
        def plain(obj):
            if obj is None:
                return None
            return {f.name: getattr(obj, f.name) for f in fields(obj)}

        out = {"experiment": self.experiment, "model": plain(self.model), "measurement": plain(self.measurement),
               "diffusion": plain(self.diffusion), "solver": plain(self.solver), "seeds": list(self.seeds),
               "output_dir": self.output_dir}
        for name in _SECTIONS:
            if getattr(self, name) is not None:
                out[name] = plain(getattr(self, name))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # builders
    def mixture(self) -> GaussianMixture:
        return self.model.build()

    def meas(self) -> LinearGaussianMeasurement:
        return self.measurement.build()

    def schedule(self) -> Schedule:
        return self.diffusion.build()

    def rmp_config(self, seed: int, **override) -> RMPConfig:
        return self.solver.build(self.schedule(), seed, **override)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", f"invalid JSON: {exc.msg}") from None
    return ExperimentConfig.from_dict(data)


def toy_config(experiment: str = "run", y: float | None = 0.2) -> dict:
    """The two-mode toy as a plain config dict."""
    return {
        "experiment": experiment,
        "model": {"weights": [0.5, 0.5], "means": [[-1.0], [1.0]], "variances": [0.04, 0.04]},
        "measurement": {"matrix": [[1.0]], "noise_std": 0.5, "y": None if y is None else [y]},
        "diffusion": {"type": "vp", "T": 1000, "beta_min": 1e-4, "beta_max": 0.02},
        "solver": {"L": 256, "guidance": "prior_free", "x_T": [0.0]},
        "seeds": [0],
    }
