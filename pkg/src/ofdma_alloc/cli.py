"""Command line: ``run``, ``sweep`` and ``compare`` subcommands writing CSV rows.

Exit codes: 0 success, 1 some run was infeasible, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .alternating import AllocateConfig, allocate
from .baselines import BASELINES, GridSpec, exhaustive_search
from .config import METHODS, SWEEP_AXES, ExperimentConfig, apply_axis, load_config, validate_experiment
from .errors import BudgetError, ConfigError, InfeasibleError, SamplingError
from .metrics import constraint_violations, objective
from .power_assignment import PowerAssignConfig
from .scenario import generate_scenario, watts_to_dbm

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2
TOY_SIZE = (4, 5)


@dataclass
class ResultRow:
    seed: int
    N: int
    K: int
    kappa1: float
    kappa2: float
    kappa3: float
    p_max_dbm: float
    method: str
    objective: float
    total_energy_j: float
    e_fl_tx_j: float
    e_fl_cmp_j: float
    e_sc_tx_j: float
    t_fl_s: float
    rho: float
    accuracy_sum: float
    outer_iters: int
    converged: bool
    runtime_ms: float


COLUMNS = [f.name for f in dataclasses.fields(ResultRow)]
_TYPES = {f.name: f.type for f in dataclasses.fields(ResultRow)}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))       # shortest string that round-trips
    return str(value)


def _unfmt(name, text):
    t = _TYPES[name]
    if t in ("int", int):
        return int(text)
    if t in ("float", float):
        return float(text)
    if t in ("bool", bool):
        return text == "true"
    return text


def write_rows(rows, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])


def read_rows(stream) -> list:
    reader = csv.reader(stream)
    header = next(reader)
    if header != COLUMNS:
        raise ValueError(f"unexpected CSV header: {header}")
    return [ResultRow(**{c: _unfmt(c, v) for c, v in zip(COLUMNS, line)}) for line in reader]


# ---------------------------------------------------------------------------

def _allocate_config(cfg: ExperimentConfig) -> AllocateConfig:
    return AllocateConfig(eps2_rel=cfg.eps2_rel, j_max=cfg.j_max,
                          power=PowerAssignConfig(eps1_rel=cfg.eps1_rel, i_max=cfg.i_max))


def run_one(task):
    """(seed, method, constants, weights, AllocateConfig) -> (ResultRow, error message or None)."""
    seed, method, constants, weights, acfg = task
    nan = float("nan")
    base = dict(seed=seed, N=constants.n_devices, K=constants.n_subcarriers, kappa1=weights.kappa1,
                kappa2=weights.kappa2, kappa3=weights.kappa3, p_max_dbm=watts_to_dbm(constants.p_max_w),
                method=method)
    t0 = time.perf_counter()
    try:
        scenario = generate_scenario(constants, seed)
        iters, converged = 0, True
        if method == "proposed":
            alloc, br, report = allocate(scenario, weights, acfg)
            iters, converged = report.outer_iterations, report.converged
        elif method == "oracle":
            res = exhaustive_search(scenario, weights, GridSpec())
            if not res.feasible:
                raise InfeasibleError("no feasible point on the oracle grid")
            alloc = res.allocation
            _, br = objective(scenario, alloc, weights)
        else:
            alloc = BASELINES[method](scenario, weights, seed)
            _, br = objective(scenario, alloc, weights)
        viol = constraint_violations(scenario, alloc)
        worst = max(viol, key=viol.get)
        if viol[worst] > 1e-9:
            raise InfeasibleError(f"{method} allocation breaks {worst} by {viol[worst]:.3g}")
    except (InfeasibleError, SamplingError, BudgetError) as err:
        ms = 1e3 * (time.perf_counter() - t0)
        row = ResultRow(**base, objective=nan, total_energy_j=nan, e_fl_tx_j=nan, e_fl_cmp_j=nan,
                        e_sc_tx_j=nan, t_fl_s=nan, rho=nan, accuracy_sum=nan, outer_iters=0,
                        converged=False, runtime_ms=ms)
        kind = "budget" if isinstance(err, BudgetError) else "infeasible"
        return row, f"{kind}: seed {seed} {method}: {err}"
    ms = 1e3 * (time.perf_counter() - t0)
    row = ResultRow(**base, objective=br.objective, total_energy_j=br.total_energy_j,
                    e_fl_tx_j=float(br.e_fl_tx_j.sum()), e_fl_cmp_j=float(br.e_fl_cmp_j.sum()),
                    e_sc_tx_j=float(br.e_sc_j.sum()), t_fl_s=br.t_fl_s, rho=float(alloc.rho),
                    accuracy_sum=br.accuracy_sum, outer_iters=iters, converged=converged, runtime_ms=ms)
    return row, None


def execute(tasks, jobs: int = 1):
    """Run tasks (in a process pool when jobs > 1); results keep task order."""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_one, tasks))
    return [run_one(t) for t in tasks]


def run(cfg: ExperimentConfig):
    acfg = _allocate_config(cfg)
    constants = cfg.scaled_constants()
    tasks = [(s, m, constants, cfg.weights, acfg) for s in cfg.seeds for m in cfg.methods]
    return execute(tasks, cfg.jobs)


def sweep(cfg: ExperimentConfig, axis: str, values):
    """Every seed is reused at every axis value; rows sorted by seed, then axis value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}", field="axis")
    acfg = _allocate_config(cfg)
    points = [apply_axis(cfg, axis, v) for v in sorted(values)]
    tasks = [(s, m, c, w, acfg) for s in cfg.seeds for (c, w) in points for m in cfg.methods]
    return execute(tasks, cfg.jobs)


def compare(cfg: ExperimentConfig):
    """Proposed, every baseline and the grid oracle on the toy instance size."""
    n, k = TOY_SIZE
    constants = cfg.scaled_constants(cfg.constants.replace(n_devices=n, n_subcarriers=k))
    acfg = _allocate_config(cfg)
    tasks = [(s, m, constants, cfg.weights, acfg) for s in cfg.seeds for m in METHODS]
    return execute(tasks, cfg.jobs)


def summary_table(rows) -> str:
    by = {}
    for r in rows:
        by.setdefault(r.method, []).append(r)
    out = io.StringIO()
    out.write(f"{'method':<10} {'runs':>4} {'feasible':>8} {'objective':>12} {'energy_J':>10} "
              f"{'T_FL_s':>9} {'runtime_ms':>11}\n")
    for m in [x for x in METHODS if x in by]:
        rs = by[m]
        ok = [r for r in rs if not math.isnan(r.objective)]
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in ok])) if ok else float("nan")
        out.write(f"{m:<10} {len(rs):>4} {len(ok):>8} {mean('objective'):>12.5g} {mean('total_energy_j'):>10.4g} "
                  f"{mean('t_fl_s'):>9.4g} {float(np.mean([r.runtime_ms for r in rs])):>11.1f}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------

def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="first seed (unsigned 64-bit)")
    common.add_argument("--seeds", type=int, help="number of consecutive seeds")
    common.add_argument("--method", help="comma list of " + ", ".join(METHODS) + ", or all (oracle excluded)")
    common.add_argument("--out", metavar="PATH", help="CSV path, '-' for stdout")
    common.add_argument("--jobs", type=int, help="worker processes")
    p = argparse.ArgumentParser(prog="ofdma-alloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="allocate every seed with each method")
    sw = sub.add_parser("sweep", parents=[common], help="paired-seed sweep over one axis")
    sw.add_argument("--axis", choices=SWEEP_AXES)
    sw.add_argument("--values", help="comma-separated axis values")
    sub.add_parser("compare", parents=[common], help="proposed vs baselines vs oracle on the 4x5 toy size")
    return p


def _merge_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    from .config import _parse_floats, _parse_methods
    try:
        if args.seed is not None:
            cfg.seed = args.seed
        if args.seeds is not None:
            cfg.n_seeds = args.seeds
        if args.method is not None:
            cfg.methods = _parse_methods(args.method)
        if args.out is not None:
            cfg.out = args.out
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if getattr(args, "axis", None) is not None:
            cfg.axis = args.axis
        if getattr(args, "values", None) is not None:
            cfg.values = _parse_floats(args.values)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    validate_experiment(cfg)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = _merge_flags(cfg, args)
        if args.command == "sweep" and (cfg.axis is None or not cfg.values):
            raise ConfigError("sweep needs --axis and --values (or axis/values in the config)")
        if args.command == "run":
            results = run(cfg)
        elif args.command == "sweep":
            results = sweep(cfg, cfg.axis, cfg.values)
            print(f"paired seeds {cfg.seeds} reused for {cfg.axis} in {sorted(cfg.values)}", file=sys.stderr)
        else:
            results = compare(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    rows = [r for r, _ in results]
    errors = [e for _, e in results if e]
    summary = sys.stderr if cfg.out == "-" else sys.stdout
    if cfg.out == "-":
        write_rows(rows, sys.stdout)
    elif cfg.out:
        with open(cfg.out, "w", newline="", encoding="utf-8") as fh:
            write_rows(rows, fh)
    summary.write(summary_table(rows))
    for e in errors:
        print(e, file=sys.stderr)
    if any(e.startswith("budget") for e in errors):
        return EXIT_CONFIG
    return EXIT_INFEASIBLE if errors else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
