"""Block-coordinate allocation: alternate the CPU/compression step and the power/assignment step."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect, minimize_scalar

from .cpu_compression import F_FLOOR_HZ, RHO_FLOOR, rho_upper_bound, solve_cpu_compression
from .errors import InfeasibleError
from .metrics import Allocation, Weights, curve_for, device_rates, objective
from .power_assignment import (PowerAssignConfig, binary_gap, is_binary, max_rates, min_power_for_rates,
                               rate_floor, reassign_subcarriers, repair_assignment, round_and_polish, solve_power_assignment)
from .scenario import Scenario


@dataclass
class AllocateConfig:
    eps2_rel: float = 1e-4            # relative to |s_0|
    j_max: int = 50
    rho_floor: float = RHO_FLOOR
    f_floor_hz: float = F_FLOOR_HZ
    assign_threshold: float = 0.5
    # let the power step move the FL deadline too (otherwise the deadline set by
    # the CPU step pins every rate floor at the current rate)
    rebalance_deadline: bool = True
    # same idea for rho, whose semantic-deadline cap otherwise pins it to the current rates
    rebalance_rho: bool = True
    rebalance_rounds: int = 3
    # greedy subcarrier moves between devices at the chosen deadline; binary
    # points are local minima of the penalised relaxation, so X never moves otherwise
    reassign: bool = True
    power: PowerAssignConfig = field(default_factory=PowerAssignConfig)


@dataclass
class SolveReport:
    outer_trace: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    kkt_summary: dict = field(default_factory=dict)
    fallback_used: bool = False
    binary_gap: float = float("nan")
    best_index: int = 0
    repaired_devices: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    moves: int = 0                  # subcarrier reassignments accepted

    @property
    def outer_iterations(self) -> int:
        return max(len(self.outer_trace) - 1, 0)


def round_robin(n: int, k: int) -> np.ndarray:
    """Subcarrier j goes to device j mod n (lower indices get the remainder)."""
    X = np.zeros((n, k))
    X[np.arange(k) % n, np.arange(k)] = 1.0
    return X


def feasible_init(scenario: Scenario, rho_floor: float = RHO_FLOOR) -> Allocation:
    c = scenario.constants
    X = round_robin(scenario.n, scenario.k)
    counts = X.sum(axis=1)
    if np.any(counts == 0):
        d = int(np.flatnonzero(counts == 0)[0])
        raise InfeasibleError(f"device {d} gets no subcarrier (K < N)", device=d)
    P = X * (c.p_max_w / counts)[:, None]
    freq = np.full(scenario.n, c.f_max_hz / 2)
    alloc = Allocation(freq, P, X, 0.0)
    rho_max = rho_upper_bound(scenario, device_rates(scenario, alloc))
    if rho_max <= rho_floor:
        raise InfeasibleError(f"semantic deadline unreachable even at rho={rho_floor:g} (rho_max={rho_max:.3g})")
    alloc.rho = min(rho_max, 0.5)
    return alloc


def deadline_slope(scenario: Scenario, weights: Weights, freq, rho: float, X, T: float) -> float:
    """d/dT of kappa1*(uplink energy at the rate floors) + kappa2*T; non-decreasing in T."""
    c = scenario.constants
    t_cmp = scenario.compute_load / np.asarray(freq, dtype=float)
    D = scenario.upload_bits
    bits = D + rho * scenario.semcom_bits
    sc_floor = rho * scenario.semcom_bits / c.t_semcom_max_s
    fl_floor = D / (T - t_cmp)
    floor = np.maximum(sc_floor, fl_floor)
    P, theta = min_power_for_rates(scenario, X, floor)
    psum = P.sum(axis=1)
    # marginal energy per extra bit/s of floor: bits*(theta*r - P)/r^2
    de = bits * (theta * floor - psum) / floor ** 2
    active = fl_floor > sc_floor
    return float(weights.kappa2 - weights.kappa1 * np.sum(np.where(active, de * D / (T - t_cmp) ** 2, 0.0)))


def rebalance_deadline(scenario: Scenario, weights: Weights, freq, rho: float, X) -> float:
    """Deadline that best trades uplink energy against FL time for fixed f, rho and X.

    With every power at its rate floor the uplink energy is convex in T, so
    the optimum is the sign change of :func:`deadline_slope`.
    """
    c = scenario.constants
    t_cmp = scenario.compute_load / np.asarray(freq, dtype=float)
    D = scenario.upload_bits
    sc_floor = rho * scenario.semcom_bits / c.t_semcom_max_s
    r_max = max_rates(scenario, X)
    short = np.flatnonzero((r_max <= 0) | (r_max < sc_floor * (1 - 1e-12)))
    if short.size:
        d = int(short[0])
        raise InfeasibleError(f"device {d} cannot meet the semantic deadline", device=d)
    t_lo = float(np.max(t_cmp + D / r_max))
    t_lo += 1e-9 * t_lo
    # past t_up every device is held by its semantic floor and the slope is kappa2
    with np.errstate(divide="ignore"):
        t_up = float(np.max(t_cmp + np.where(sc_floor > 0, D / np.where(sc_floor > 0, sc_floor, 1.0), np.inf)))
    if not np.isfinite(t_up) or t_up <= t_lo:
        return t_lo
    slope = lambda T: deadline_slope(scenario, weights, freq, rho, X, T)
    if slope(t_lo) >= 0:
        return t_lo
    if slope(t_up) < 0:
        return t_up
    return float(bisect(slope, t_lo, t_up, xtol=1e-10 * t_up, maxiter=200))


def floor_cost(scenario: Scenario, weights: Weights, freq, rho: float, X, T: float, r_max=None) -> float:
    """kappa1*(uplink energy) - kappa3*N*A(rho) with every power at its rate floor; inf if unreachable."""
    c = scenario.constants
    t_cmp = scenario.compute_load / np.asarray(freq, dtype=float)
    if np.any(T <= t_cmp):
        return float("inf")
    floor = np.maximum(rho * scenario.semcom_bits / c.t_semcom_max_s, scenario.upload_bits / (T - t_cmp))
    r_max = max_rates(scenario, X) if r_max is None else r_max
    if np.any(floor > r_max * (1 - 1e-12)):
        return float("inf")
    P, _ = min_power_for_rates(scenario, X, floor)
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    acc = scenario.n * curve_for(scenario).value(rho)
    return float(weights.kappa1 * np.sum(bits * P.sum(axis=1) / floor) - weights.kappa3 * acc)


def rebalance_rho(scenario: Scenario, weights: Weights, freq, rho: float, X, T: float,
                  rho_floor: float = RHO_FLOOR) -> float:
    """Compression rate minimising :func:`floor_cost` at a fixed deadline.

    The semantic floor rises with rho, so unlike the CPU step this lets rho
    and the rates grow together. Keeps the current rho unless the new one is
    strictly better.
    """
    c = scenario.constants
    r_max = max_rates(scenario, X)
    cap = float(np.min(c.t_semcom_max_s * r_max / scenario.semcom_bits))
    # stay a hair inside the semantic cap so the floor remains reachable
    hi = 1.0 if cap > 1.0 else cap * (1 - 1e-9)
    if hi <= rho_floor:
        return rho
    cost = lambda r: floor_cost(scenario, weights, freq, r, X, T, r_max)
    res = minimize_scalar(cost, bounds=(rho_floor, hi), method="bounded", options={"xatol": 1e-9})
    best = float(res.x)
    for cand in (hi, rho_floor):
        if cost(cand) < cost(best):
            best = cand
    return best if cost(best) < cost(rho) else rho


def _merge(into: dict, new: dict):
    for key, val in new.items():
        into[key] = max(into.get(key, 0.0), float(val))


def power_step(scenario: Scenario, weights: Weights, alloc: Allocation, deadline: float,
               cfg: AllocateConfig | None = None, fix_rho: bool = False):
    """Power/assignment step at fixed CPU frequencies.

    On a binary assignment the deadline (and rho unless fix_rho) are first
    re-balanced against the uplink energy, and subcarriers are moved between
    devices; then the successive-approximation solver runs at that deadline.
    Returns (P, X, rho, deadline, PowerAssignReport, moves).
    """
    cfg = cfg or AllocateConfig()
    freq, rho = alloc.freq_hz, alloc.rho
    P, X = alloc.power_w, alloc.assign
    moves = 0
    if cfg.rebalance_deadline and is_binary(X):
        sc_floor = rho * scenario.semcom_bits / scenario.constants.t_semcom_max_s
        X, fixed = repair_assignment(scenario, X, sc_floor, rho)
        moves += fixed
        deadline = rebalance_deadline(scenario, weights, freq, rho, X)
        for _ in range(0 if fix_rho or not cfg.rebalance_rho else cfg.rebalance_rounds):
            new = rebalance_rho(scenario, weights, freq, rho, X, deadline, cfg.rho_floor)
            if new == rho:
                break
            rho = new
            deadline = rebalance_deadline(scenario, weights, freq, rho, X)
        if cfg.reassign and weights.kappa1 > 0:
            r_min = rate_floor(scenario, rho, deadline, freq).r_min
            X_moved, n_moved = reassign_subcarriers(scenario, X, r_min, rho)
            if n_moved:
                X = X_moved
                moves += n_moved
        if moves:
            P = X * (scenario.constants.p_max_w / X.sum(axis=1))[:, None]
    P, X, _, rep = solve_power_assignment(scenario, freq, rho, deadline, P, X, weights, cfg.power)
    return P, X, rho, deadline, rep, moves


def allocate(scenario: Scenario, weights: Weights, config: AllocateConfig | None = None):
    """Returns (Allocation, CostBreakdown, SolveReport)."""
    cfg = config or AllocateConfig()
    t0 = time.perf_counter()
    report = SolveReport()
    alloc = feasible_init(scenario, cfg.rho_floor)
    s, _ = objective(scenario, alloc, weights)
    report.outer_trace.append(s)
    eps2 = cfg.eps2_rel * max(abs(s), 1e-300)
    best = (s, alloc.copy(), None)
    for j in range(1, cfg.j_max + 1):
        sol = solve_cpu_compression(scenario, alloc, weights, rho_floor=cfg.rho_floor, f_floor=cfg.f_floor_hz)
        _merge(report.kkt_summary, {"cpu_" + k: v for k, v in sol.kkt_residuals.items()})
        alloc = Allocation(sol.freq_hz, alloc.power_w, alloc.assign, sol.rho)
        P, X, rho, deadline, rep, moves = power_step(scenario, weights, alloc, sol.deadline_s, cfg)
        alloc.rho = rho
        report.moves += moves
        report.inner_iterations.append(rep.iterations)
        report.fallback_used |= rep.fallback_used
        report.warnings.extend(rep.warnings)
        if rep.converged:
            _merge(report.kkt_summary, {"power_" + k: v for k, v in rep.kkt.items()})
        alloc = Allocation(alloc.freq_hz, P, X, alloc.rho)
        s_new, _ = objective(scenario, alloc, weights)
        report.outer_trace.append(s_new)
        if s_new < best[0]:
            best = (s_new, alloc.copy(), deadline)
            report.best_index = j
        if abs(s_new - s) <= eps2:
            report.converged = True
            s = s_new
            break
        s = s_new

    _, alloc, deadline = best
    if deadline is None:
        # no step improved on the start; still return a polished binary point
        deadline = float(np.max(scenario.upload_bits / device_rates(scenario, alloc)
                                + scenario.compute_load / alloc.freq_hz))
    P, X, _, rep, repaired = round_and_polish(scenario, alloc.power_w, alloc.assign, alloc.freq_hz, alloc.rho,
                                              deadline, weights, cfg.assign_threshold, cfg.power)
    report.repaired_devices = repaired
    final = Allocation(alloc.freq_hz, P, X, alloc.rho)
    value, breakdown = objective(scenario, final, weights)
    report.binary_gap = binary_gap(X)
    _merge(report.kkt_summary, {"polish_" + k: v for k, v in rep.kkt.items()})
    report.wall_time = time.perf_counter() - t0
    return final, breakdown, report
