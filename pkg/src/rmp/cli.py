"""Command-line harness: ``rmp run|figures|sweep|frontier|check``.

Outputs go to ``--out`` if given, else the config's ``output_dir``, else
``$RMP_OUTPUT_ROOT/<config name>`` (default root ``./rmp_output``).  CSVs carry
floats in round-trip ``repr`` form and contain no timestamps, so rerunning a
config reproduces them byte for byte; wall time and timestamps live only in
``summary.json``.

Exit codes: 0 success, 1 failed checks, 2 config error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checks
from .baselines import FrontierProblem, frontier_csv, frontier_medians, nfe_frontier
from .config import ConfigError, ExperimentConfig, FiguresSpec, FrontierSpec, SweepSpec, load_config
from .oracle import posterior_mean_closed_form, posterior_mean_importance, posterior_mean_quadrature
from .rng import RNG_ID
from .solver import Trajectory, run_rmp

ENV_ROOT = "RMP_OUTPUT_ROOT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class NumericalAbort(RuntimeError):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _out_dir(args, cfg: ExperimentConfig | None, default_name: str) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None and cfg.output_dir:
        out = Path(cfg.output_dir)
    else:
        out = Path(os.environ.get(ENV_ROOT, "rmp_output")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _checked(tr: Trajectory, label: str) -> Trajectory:
    if tr.status != "ok":
        raise NumericalAbort(f"{label}: {tr.error}")
    return tr


def _meta(cfg: ExperimentConfig, t0: float) -> dict:
    return {
        "config": cfg.to_dict(),
        "rng": RNG_ID,
        "wall_time_s": time.perf_counter() - t0,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }


def _oracle(cfg: ExperimentConfig, y) -> dict:
    m, meas = cfg.mixture(), cfg.meas()
    return {"method": "closed_form", "mean": posterior_mean_closed_form(m, meas, y).tolist()}


def _scalar_y(cfg: ExperimentConfig, what: str):
    meas = cfg.meas()
    if meas.M != 1:
        raise ConfigError("$.measurement.matrix", f"{what} sweeps scalar y and needs a single measurement row")


# -- commands ---------------------------------------------------------------------------


def cmd_run(args, cfg: ExperimentConfig) -> int:
    t0 = time.perf_counter()
    seed = cfg.seeds[0] if args.seed is None else args.seed
    y = np.array(cfg.measurement.y)
    tr = run_rmp(cfg.rmp_config(seed), cfg.mixture(), cfg.meas(), y)
    out = _out_dir(args, cfg, args.name)
    (out / "trajectory.csv").write_text(tr.to_csv())
    summary = {
        "status": tr.status,
        "error": tr.error,
        "mu0": None if tr.mu0 is None else tr.mu0.tolist(),
        "x_T": tr.x_T.tolist(),
        "nfe": tr.total_nfe,
        "records": int(tr.ks.size),
        "seed": seed,
        "oracle": _oracle(cfg, y),
        **_meta(cfg, t0),
    }
    write_json(out / "summary.json", summary)
    if tr.status != "ok":
        raise NumericalAbort(tr.error)
    print(json.dumps({"mu0": summary["mu0"], "oracle": summary["oracle"]["mean"], "nfe": tr.total_nfe, "out": str(out)}))
    return EXIT_OK


def _traj_rows(tag: list, tr: Trajectory):
    yield [*tag, tr.ks[0] + 1 if tr.ks.size else 0, *tr.x_T]
    for k, mu in zip(tr.ks, tr.mu):
        yield [*tag, int(k), *mu]


def cmd_figures(args, cfg: ExperimentConfig) -> int:
    t0 = time.perf_counter()
    fig = cfg.figures or FiguresSpec()
    _scalar_y(cfg, "figures")
    m, meas = cfg.mixture(), cfg.meas()
    d = m.d
    if d != 1:
        raise ConfigError("$.model.means", "figures need a one-dimensional model")
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = _out_dir(args, cfg, args.name)
    mu_cols = [f"mu{j}" for j in range(d)]

    def run(y, x_T, s):
        cfg_r = cfg.rmp_config(s, x_T=None if x_T is None else np.full(d, x_T))
        return _checked(run_rmp(cfg_r, m, meas, np.array([y])), f"y={y}")

    # (a) y sweep at x_T = 0
    trs = _map(lambda y: run(y, 0.0, seed), fig.y_sweep, args.threads)
    write_csv(out / "panel_a.csv", ["y", "x_T", "k", *mu_cols],
              (r for y, tr in zip(fig.y_sweep, trs) for r in _traj_rows([y, 0.0], tr)))
    # (b) random x_T at a fixed y; run i uses seed + i
    trs_b = _map(lambda i: run(fig.panel_b_y, None, seed + i), range(fig.random_x_T), args.threads)
    write_csv(out / "panel_b.csv", ["run", "y", "x_T", "k", *mu_cols],
              (r for i, tr in enumerate(trs_b) for r in _traj_rows([i, fig.panel_b_y, float(tr.x_T[0])], tr)))
    # (c) fixed (x_T, y) pairs
    trs_c = _map(lambda p: run(p[1], p[0], seed), fig.pairs, args.threads)
    write_csv(out / "panel_c.csv", ["x_T", "y", "k", *mu_cols],
              (r for p, tr in zip(fig.pairs, trs_c) for r in _traj_rows([p[0], p[1]], tr)))
    # (d) mu_0 against the oracle over a y grid
    grid = np.linspace(fig.grid[0], fig.grid[1], fig.grid[2])
    trs_d = _map(lambda y: run(float(y), 0.0, seed), grid, args.threads)
    oracle = [float(posterior_mean_closed_form(m, meas, [y])[0]) for y in grid]
    mu0 = [float(tr.mu0[0]) for tr in trs_d]
    err = [abs(a - b) for a, b in zip(mu0, oracle)]
    write_csv(out / "panel_d.csv", ["y", "mu0", "oracle", "abs_err"], zip(grid, mu0, oracle, err))
    zero = [e for y, e in zip(grid, mu0) if y == 0.0]
    summary = {
        "panel_d": {
            "max_abs_err": max(err),
            "argmax_y": float(grid[int(np.argmax(err))]),
            "abs_mu0_at_y0": abs(zero[0]) if zero else None,
        },
        "panel_b_mu0_spread": float(np.ptp([tr.mu0[0] for tr in trs_b])),
        "panel_c_pairs": fig.pairs,
        "seed": seed,
        "oracle": {"method": "closed_form"},
        **_meta(cfg, t0),
    }
    write_json(out / "summary.json", summary)
    print(json.dumps({"max_abs_err": max(err), "out": str(out)}))
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    t0 = time.perf_counter()
    sw = cfg.sweep or SweepSpec()
    _scalar_y(cfg, "sweep")
    m, meas = cfg.mixture(), cfg.meas()
    seeds = cfg.seeds if args.seed is None else [args.seed]
    out = _out_dir(args, cfg, args.name)
    (out / "runs").mkdir(exist_ok=True)
    tasks = [(i, y, s) for i, y in enumerate(sw.ys) for s in seeds]

    def run(task):
        i, y, s = task
        tr = _checked(run_rmp(cfg.rmp_config(s), m, meas, np.array([y])), f"y={y}, seed={s}")
        (out / "runs" / f"y{i:03d}_seed{s}.csv").write_text(tr.to_csv())
        return tr

    trs = _map(run, tasks, args.threads)
    oracles = {}
    for i, y in enumerate(sw.ys):
        o = {"closed_form": posterior_mean_closed_form(m, meas, [y])}
        if m.d <= 2:
            o["quadrature"] = posterior_mean_quadrature(m, meas, [y]).mean
        o["importance"] = posterior_mean_importance(m, meas, [y], sw.importance_n, seed=i)
        oracles[i] = o
    d = m.d
    header = ["y", "seed", *[f"mu0_{j}" for j in range(d)], *[f"closed_form_{j}" for j in range(d)],
              *([f"quadrature_{j}" for j in range(d)] if d <= 2 else []),
              *[f"importance_{j}" for j in range(d)], *[f"importance_se_{j}" for j in range(d)], "err_norm", "nfe"]
    rows = []
    for (i, y, s), tr in zip(tasks, trs):
        o = oracles[i]
        rows.append([y, s, *tr.mu0, *o["closed_form"], *(o["quadrature"] if d <= 2 else []),
                     *o["importance"].mean, *o["importance"].stderr,
                     float(np.linalg.norm(tr.mu0 - o["closed_form"])), tr.total_nfe])
    write_csv(out / "sweep.csv", header, rows)
    errs = [r[-2] for r in rows]
    summary = {
        "runs": len(rows),
        "max_err_norm": max(errs),
        "oracle": {"methods": ["closed_form", *(["quadrature"] if d <= 2 else []), "importance"],
                   "importance_n": sw.importance_n},
        **_meta(cfg, t0),
    }
    write_json(out / "summary.json", summary)
    print(json.dumps({"runs": len(rows), "max_err_norm": max(errs), "out": str(out)}))
    return EXIT_OK


def cmd_frontier(args, cfg: ExperimentConfig) -> int:
    t0 = time.perf_counter()
    fr = cfg.frontier or FrontierSpec()
    _scalar_y(cfg, "frontier")
    seeds = tuple(cfg.seeds if args.seed is None else [args.seed])
    problem = FrontierProblem(cfg.mixture(), cfg.meas(), ys=tuple(fr.ys), seeds=seeds, T_pass=fr.T_pass,
                              beta_ct=tuple(fr.beta_ct), guidance=cfg.solver.strategy())
    try:
        rows = nfe_frontier(problem, fr.budgets, threads=args.threads)
    except ValueError as exc:
        raise ConfigError("$.frontier.budgets", str(exc)) from None
    except FloatingPointError as exc:
        raise NumericalAbort(str(exc)) from None
    out = _out_dir(args, cfg, args.name)
    (out / "frontier.csv").write_text(frontier_csv(rows))
    med = frontier_medians(rows)
    summary = {
        "median_sq_error": [{"method": k[0], "budget": k[1], "median": v} for k, v in med.items()],
        "note": "MSE to the posterior mean on a toy problem; an analogue of an NFE-vs-quality curve, not a reproduction",
        "oracle": {"method": "closed_form"},
        **_meta(cfg, t0),
    }
    write_json(out / "summary.json", summary)
    for (method, b), v in med.items():
        print(f"{method:10s} budget={b:6d} median_sq_err={v:.6g}")
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        results = checks.run_suite(args.suite)
    except KeyError as exc:
        _error("config", "suite", exc.args[0])
        return EXIT_CONFIG
    for r in results:
        print(r.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"check_{args.suite}.json", {"suite": args.suite, "results": [r.to_dict() for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# -- entry point ------------------------------------------------------------------------------


def _error(kind: str, location: str, message: str) -> None:
    print(json.dumps({"error": kind, "location": location, "message": message}), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rmp",
        description="Reverse mean propagation experiments on tractable posteriors.",
        epilog=f"Default output root: ${ENV_ROOT} (else ./rmp_output). "
        "Exit codes: 0 ok, 1 failed checks, 2 config error, 3 numerical abort.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "run": "one RMP run: trajectory.csv + summary.json",
        "figures": "trajectory panels (a)-(d) for the toy problem",
        "sweep": "y sweep with closed-form, quadrature and importance-sampling oracles",
        "frontier": "NFE-budget comparison of RMP against sample averaging",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True, help="path to a JSON experiment config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seeds")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
    sp = sub.add_parser("check", help="run an invariant suite", description="run an invariant suite")
    sp.add_argument("suite", help=f"one of: {', '.join(checks.SUITES)}")
    sp.add_argument("--out", help="write check_<suite>.json here")
    sp.add_argument("--threads", type=int, default=1, help="unused; accepted for symmetry")
    return p


COMMANDS = {"run": cmd_run, "figures": cmd_figures, "sweep": cmd_sweep, "frontier": cmd_frontier}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check":
        return cmd_check(args)
    if args.threads < 1:
        _error("config", "--threads", "must be >= 1")
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        _error("config", "--seed", "must be >= 0")
        return EXIT_CONFIG
    args.name = Path(args.config).stem
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _error("config", exc.path, exc.message)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as exc:
        _error("numerical", args.command, str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
