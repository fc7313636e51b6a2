"""Reference allocators, a grid-search oracle and small brute-force checkers.

The baselines each freeze part of the decision and optimise (or sample) the
rest. ``exhaustive_search`` scans a coarse joint grid; it is exact *on that
grid* because, once the assignment and powers are fixed, the compression rate
and the CPU frequencies separate (see ``_best_freqs``).
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .alternating import power_step, round_robin
from .cpu_compression import (RHO_FLOOR, _deadline_multipliers, cpu_compression_kkt, objective_terms,
                              rho_upper_bound, solve_cpu_compression)
from .errors import BudgetError, InfeasibleError, SamplingError
from .metrics import Allocation, Weights, constraint_violations, curve_for, device_rates, link_rate, objective
from .power_assignment import power_assignment_kkt
from .scenario import Scenario, dbm_to_watts

BASELINE_FREQ_HZ = 1e9


def equal_allocation(scenario: Scenario) -> Allocation:
    """Round-robin subcarriers, P_max split evenly, f = 1 GHz, rho = 1."""
    c = scenario.constants
    X = round_robin(scenario.n, scenario.k)
    counts = X.sum(axis=1)
    P = X * (c.p_max_w / np.maximum(counts, 1))[:, None]
    freq = np.full(scenario.n, min(BASELINE_FREQ_HZ, c.f_max_hz))
    return Allocation(freq, P, X, 1.0)


def comm_only(scenario: Scenario, weights: Weights, seed: int | None = None) -> Allocation:
    """Random CPU frequencies in [0.5, 1.5] GHz, rho = 1; power and subcarriers optimised."""
    c = scenario.constants
    rng = np.random.default_rng(scenario.rng_seed if seed is None else seed)
    freq = np.minimum(rng.uniform(0.5e9, 1.5e9, size=scenario.n), c.f_max_hz)
    start = equal_allocation(scenario)
    start.freq_hz = freq
    rates = device_rates(scenario, start)
    with np.errstate(divide="ignore"):
        deadline = float(np.max(scenario.upload_bits / rates + scenario.compute_load / freq))
    P, X, rho, _, _, _ = power_step(scenario, weights, start, deadline, fix_rho=True)
    return Allocation(freq, P, X, rho)


def comp_only(scenario: Scenario, weights: Weights) -> Allocation:
    """Equal subcarriers and power; CPU frequencies and rho optimised."""
    start = equal_allocation(scenario)
    sol = solve_cpu_compression(scenario, start, weights)
    return Allocation(sol.freq_hz, start.power_w, start.assign, sol.rho)


def random_allocation(scenario: Scenario, seed: int, max_attempts: int = 100_000) -> Allocation:
    """Uniform sample of a feasible (X, P, f) with rho = 1.

    X is drawn first (each subcarrier to a uniform device). Given X the
    constraints separate per device, so each device's (power row, f) is
    drawn uniformly from {p >= 0, sum p <= P_max} x (0, f_max] and redrawn
    until its semantic deadline holds. Every draw counts toward max_attempts.
    """
    c = scenario.constants
    rng = np.random.default_rng(seed)
    n, k = scenario.n, scenario.k
    need = scenario.semcom_bits / c.t_semcom_max_s
    attempts = 0
    failures = {"no_subcarrier": 0, "semcom_deadline": 0}
    while True:
        owner = rng.integers(0, n, size=k)
        X = np.zeros((n, k))
        X[owner, np.arange(k)] = 1.0
        attempts += 1
        if np.any(X.sum(axis=1) == 0):
            failures["no_subcarrier"] += 1
            if attempts >= max_attempts:
                raise SamplingError(f"no feasible sample in {attempts} attempts: {failures}")
            continue
        P = np.zeros((n, k))
        freq = np.zeros(n)
        for d in range(n):
            cols = np.flatnonzero(X[d])
            while True:
                # Dirichlet(1,..,1) over m+1 parts is uniform on the scaled simplex
                share = rng.dirichlet(np.ones(cols.size + 1))[:-1]
                row = share * c.p_max_w
                f = c.f_max_hz * (1.0 - rng.random())
                r = link_rate(row, scenario.gains[d, cols], c.subcarrier_bandwidth_hz, c.noise_psd_w_per_hz).sum()
                attempts += 1
                if r >= need[d]:
                    break
                failures["semcom_deadline"] += 1
                if attempts >= max_attempts:
                    raise SamplingError(f"no feasible sample in {attempts} attempts: {failures}")
            P[d, cols] = row
            freq[d] = f
        return Allocation(freq, P, X, 1.0)


# ---------------------------------------------------------------------------
# grid oracle

@dataclass(frozen=True)
class GridSpec:
    f_lo: float = 0.1e9
    f_hi: float = 2e9
    f_step: float = 0.1e9
    p_lo: float = 10.0      # dBm, per-device total
    p_hi: float = 20.0
    p_step: float = 2.0
    rho_lo: float = 0.1
    rho_hi: float = 1.0
    rho_step: float = 0.1
    allow_unassigned: bool = False

    def __post_init__(self):
        for ax in ("f", "p", "rho"):
            lo, hi, step = getattr(self, ax + "_lo"), getattr(self, ax + "_hi"), getattr(self, ax + "_step")
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"{ax}: need lo <= hi, got {lo}, {hi}")
            if not step > 0:
                raise ValueError(f"{ax}: step must be > 0")

    @staticmethod
    def _axis(lo, hi, step):
        m = int(np.floor((hi - lo) / step + 1e-9))
        return lo + step * np.arange(m + 1)

    def freqs(self):
        return self._axis(self.f_lo, self.f_hi, self.f_step)

    def powers_dbm(self):
        return self._axis(self.p_lo, self.p_hi, self.p_step)

    def rhos(self):
        return self._axis(self.rho_lo, self.rho_hi, self.rho_step)


@dataclass
class OracleResult:
    allocation: Allocation | None
    objective: float
    visited: int            # grid points covered (every f, p, rho, X combination)
    evaluated: int          # (X, power) combinations actually scored
    runtime_s: float

    @property
    def feasible(self) -> bool:
        return self.allocation is not None


def _assignments(n, k, allow_unassigned):
    choices = n + 1 if allow_unassigned else n
    for owner in itertools.product(range(choices), repeat=k):
        owner = np.array(owner)
        X = np.zeros((n, k))
        hit = owner < n
        X[owner[hit], np.arange(k)[hit]] = 1.0
        if np.all(X.sum(axis=1) > 0):
            yield X


def oracle_size(scenario: Scenario, grid: GridSpec) -> tuple[int, int]:
    """(grid points covered, (X, power) combinations scored)."""
    n, k = scenario.n, scenario.k
    choices = n + 1 if grid.allow_unassigned else n
    n_x = choices ** k
    n_p = grid.powers_dbm().size ** n
    covered = n_x * n_p * grid.rhos().size * grid.freqs().size ** n
    return covered, n_x * n_p


def _best_freqs(t_up, load, freqs, kappa1, kappa2, xi):
    """Min over the per-device f grid of kappa1*sum xi*load*f^2 + kappa2*max(t_up + load/f).

    t_up: (M, N) upload times, freqs sorted ascending. For a candidate
    deadline T every device takes the slowest grid frequency that still meets
    it, and T only needs to range over finishing times the grid can produce.
    Returns (best value (M,), frequency index (M, N)).
    """
    M, n = t_up.shape
    fin = t_up[:, :, None] + load[None, :, None] / freqs[None, None, :]          # (M, N, F)
    T = fin.reshape(M, 1, -1)                                                    # (M, 1, C)
    slack = T - t_up[:, :, None]                                                 # (M, N, C)
    with np.errstate(divide="ignore"):
        need = np.where(slack > 0, load[None, :, None] / np.where(slack > 0, slack, 1.0), np.inf)
    idx = np.searchsorted(freqs, need * (1 - 1e-12))                             # (M, N, C)
    valid = np.all(idx < freqs.size, axis=1)                                     # (M, C)
    idx = np.minimum(idx, freqs.size - 1)
    f = freqs[idx]
    cost = kappa1 * xi * np.sum(load[None, :, None] * f ** 2, axis=1)
    t_fl = np.max(t_up[:, :, None] + load[None, :, None] / f, axis=1)
    total = np.where(valid, cost + kappa2 * t_fl, np.inf)
    c = np.argmin(total, axis=1)
    return total[np.arange(M), c], idx[np.arange(M), :, c]


def exhaustive_search(scenario: Scenario, weights: Weights, grid: GridSpec | None = None,
                      budget: int = 2_000_000_000) -> OracleResult:
    """Best feasible point of the joint (X, per-device power, rho, f) grid.

    Power is a per-device total from the dBm grid split evenly over the owned
    subcarriers. Raises BudgetError before doing any work when the number of
    scored (X, power) combinations times the frequency candidates exceeds budget.
    """
    grid = grid or GridSpec()
    t0 = time.perf_counter()
    c = scenario.constants
    n, k = scenario.n, scenario.k
    freqs = grid.freqs()
    freqs = freqs[(freqs > 0) & (freqs <= c.f_max_hz * (1 + 1e-12))]
    rhos = grid.rhos()
    rhos = rhos[(rhos > 0) & (rhos <= 1.0 + 1e-12)]
    levels = dbm_to_watts(grid.powers_dbm())
    levels = levels[levels <= c.p_max_w * (1 + 1e-9)]
    covered, scored = oracle_size(scenario, grid)
    work = scored * n * freqs.size * n
    if work > budget:
        raise BudgetError(f"grid needs ~{work:.3g} operations (budget {budget:.3g})", estimated=int(work))
    curve = curve_for(scenario)
    load = scenario.compute_load
    sc_bits = scenario.semcom_bits
    bbar, n0 = c.subcarrier_bandwidth_hz, c.noise_psd_w_per_hz
    combos = np.array(list(itertools.product(range(levels.size), repeat=n)))    # (M, N)
    ptot = levels[combos]                                                       # (M, N)
    acc = scenario.n * curve.value(rhos)

    best_val, best_alloc, evaluated = np.inf, None, 0
    if freqs.size and rhos.size and levels.size:
        for X in _assignments(n, k, grid.allow_unassigned):
            counts = X.sum(axis=1)
            per_link = ptot / counts[None, :]                                   # (M, N)
            snr = per_link[:, :, None] * scenario.gains[None, :, :] / (n0 * bbar)
            rates = (X[None] * bbar * np.log1p(snr) / np.log(2.0)).sum(axis=2)  # (M, N)
            evaluated += combos.shape[0]
            # rho part: semantic energy vs accuracy, capped by the semantic deadline
            rho_max = np.min(c.t_semcom_max_s * rates / sc_bits[None, :], axis=1)
            e_per_rho = (ptot * sc_bits[None, :] / rates).sum(axis=1)
            vals = weights.kappa1 * e_per_rho[:, None] * rhos[None, :] - weights.kappa3 * acc[None, :]
            vals = np.where(rhos[None, :] <= rho_max[:, None] * (1 + 1e-12), vals, np.inf)
            ir = np.argmin(vals, axis=1)
            v_rho = vals[np.arange(vals.shape[0]), ir]
            ok = np.isfinite(v_rho)
            if not ok.any():
                continue
            t_up = scenario.upload_bits[None, :] / rates
            e_tx = weights.kappa1 * (ptot * t_up).sum(axis=1)
            v_f, idx = _best_freqs(t_up[ok], load, freqs, weights.kappa1, weights.kappa2, c.switched_capacitance)
            total = v_rho[ok] + e_tx[ok] + v_f
            m = int(np.argmin(total))
            if total[m] < best_val:
                row = np.flatnonzero(ok)[m]
                P = X * per_link[row][:, None]
                best_val = float(total[m])
                best_alloc = Allocation(freqs[idx[m]], P, X.copy(), float(rhos[ir[row]]))
    value = float("inf")
    if best_alloc is not None:
        value, _ = objective(scenario, best_alloc, weights, curve)
    return OracleResult(best_alloc, value, covered, evaluated, time.perf_counter() - t0)


def grid_objective(scenario: Scenario, weights: Weights, alloc: Allocation) -> float:
    """objective() with +inf for allocations that break a constraint."""
    viol = constraint_violations(scenario, alloc)
    if max(viol.values()) > 1e-9:
        return float("inf")
    return objective(scenario, alloc, weights)[0]


# ---------------------------------------------------------------------------
# dense brute force for tiny instances (used to certify the block solvers)

def brute_force_cpu_compression(scenario: Scenario, alloc: Allocation, weights: Weights,
                                f_step: float = 1e6, rho_step: float = 1e-3):
    """Dense grid minimum of the (f, rho) subproblem at fixed power and assignment.

    Returns (value, freq, rho, step_tolerance). The tolerance is the largest
    objective change caused by moving the grid minimiser one step along any axis.
    """
    c = scenario.constants
    rates = device_rates(scenario, alloc)
    powers = alloc.device_power
    rho_max = rho_upper_bound(scenario, rates)
    fgrid = np.arange(1, int(np.floor(c.f_max_hz / f_step)) + 1) * f_step
    rgrid = np.arange(1, int(np.floor(rho_max / rho_step)) + 1) * rho_step
    if rgrid.size == 0:
        raise InfeasibleError("rho grid empty below rho_max")
    curve = curve_for(scenario)
    # rho and f separate at fixed rates
    rho_vals = (weights.kappa1 * rgrid * np.sum(powers * scenario.semcom_bits / rates)
                - weights.kappa3 * scenario.n * curve.value(rgrid))
    ir = int(np.argmin(rho_vals))
    taus = scenario.upload_bits / rates
    load = scenario.compute_load
    if scenario.n == 1:
        fv = (weights.kappa1 * c.switched_capacitance * load[0] * fgrid ** 2
              + weights.kappa2 * (taus[0] + load[0] / fgrid))
        i_f = int(np.argmin(fv))
        freq = np.array([fgrid[i_f]])
        neighbours = [fv[max(i_f - 1, 0)], fv[min(i_f + 1, fgrid.size - 1)]]
        f_tol = max(abs(v - fv[i_f]) for v in neighbours)
    else:
        v_f, idx = _best_freqs(taus[None, :], load, fgrid, weights.kappa1, weights.kappa2,
                               c.switched_capacitance)
        freq = fgrid[idx[0]]
        base = objective_terms(scenario, powers, rates, weights, freq, rgrid[ir])
        f_tol = 0.0
        for d in range(scenario.n):
            for s in (-1, 1):
                j = int(np.clip(idx[0, d] + s, 0, fgrid.size - 1))
                ff = freq.copy()
                ff[d] = fgrid[j]
                f_tol = max(f_tol, abs(objective_terms(scenario, powers, rates, weights, ff, rgrid[ir]) - base))
    neighbours = [rho_vals[max(ir - 1, 0)], rho_vals[min(ir + 1, rgrid.size - 1)]]
    r_tol = max(abs(v - rho_vals[ir]) for v in neighbours)
    value = objective_terms(scenario, powers, rates, weights, freq, rgrid[ir])
    return value, freq, float(rgrid[ir]), f_tol + r_tol


def transmit_energy(scenario: Scenario, P, X, rho: float) -> float:
    """sum_n (D_n + rho C_n) * P_n / r_n: the power/assignment objective without weights."""
    c = scenario.constants
    rates = np.sum(X * link_rate(P, scenario.gains, c.subcarrier_bandwidth_hz, c.noise_psd_w_per_hz), axis=1)
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.where(bits > 0, bits * P.sum(axis=1) / rates, 0.0)))


def brute_force_power_assignment(scenario: Scenario, r_min, rho: float, p_step: float = 1e-4):
    """Dense grid minimum of the transmit energy over binary X and per-link powers.

    Fractional assignments break the binary constraint of the original
    problem, so X ranges over {0, 1} (each subcarrier to one device or
    unused). Given X the devices separate, so each device's owned powers are
    scanned on their own. Returns (value, P, X, step_tolerance).
    """
    c = scenario.constants
    n, k = scenario.n, scenario.k
    r_min = np.asarray(r_min, dtype=float)
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    pgrid = np.arange(0, int(np.floor(c.p_max_w / p_step + 1e-9)) + 1) * p_step
    best = (np.inf, None, None, 0.0)
    cache = {}

    def device_best(d, cols):
        key = (d, cols)
        if key in cache:
            return cache[key]
        if not cols:
            cache[key] = (np.inf if r_min[d] > 0 else 0.0, np.zeros(0), 0.0)
            return cache[key]
        mesh = np.stack(np.meshgrid(*([pgrid] * len(cols)), indexing="ij"), axis=-1).reshape(-1, len(cols))
        tot = mesh.sum(axis=1)
        r = link_rate(mesh, scenario.gains[d, list(cols)][None, :], c.subcarrier_bandwidth_hz,
                      c.noise_psd_w_per_hz).sum(axis=1)
        ok = (tot <= c.p_max_w * (1 + 1e-12)) & (r >= r_min[d]) & (r > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            e = np.where(ok, bits[d] * tot / r, np.inf)
        i = int(np.argmin(e))
        if not np.isfinite(e[i]):
            cache[key] = (np.inf, mesh[i], 0.0)
            return cache[key]
        # one step along each owned link, keeping only feasible neighbours
        tol = 0.0
        for a in range(len(cols)):
            for s in (-1, 1):
                q = mesh[i].copy()
                q[a] += s * p_step
                if q[a] < 0 or q.sum() > c.p_max_w * (1 + 1e-12):
                    continue
                rq = link_rate(q, scenario.gains[d, list(cols)], c.subcarrier_bandwidth_hz,
                               c.noise_psd_w_per_hz).sum()
                if rq > 0:
                    tol = max(tol, abs(bits[d] * q.sum() / rq - e[i]))
        cache[key] = (float(e[i]), mesh[i], tol)
        return cache[key]

    for owner in itertools.product(range(n + 1), repeat=k):
        X = np.zeros((n, k))
        total, tol = 0.0, 0.0
        P = np.zeros((n, k))
        for d in range(n):
            cols = tuple(j for j in range(k) if owner[j] == d)
            X[d, list(cols)] = 1.0
            e, p, t = device_best(d, cols)
            total += e
            tol += t
            if cols:
                P[d, list(cols)] = p
        if total < best[0]:
            best = (total, P, X, tol)
    return best


# ---------------------------------------------------------------------------

_STATIONARITY = ("stationarity",)
_SLACKNESS = ("slackness",)
_PRIMAL = ("violation",)
_DUAL = ("dual_feasibility", "nu_positive")


def summarize_kkt(residuals: dict) -> dict:
    """Group a flat residual dict into the four KKT families (max of each)."""
    out = {"stationarity": 0.0, "slackness": 0.0, "primal": 0.0, "dual": 0.0}
    for key, val in residuals.items():
        if any(t in key for t in _DUAL):
            fam = "dual"
        elif any(t in key for t in _STATIONARITY):
            fam = "stationarity"
        elif any(t in key for t in _SLACKNESS):
            fam = "slackness"
        elif any(t in key for t in _PRIMAL):
            fam = "primal"
        else:
            continue
        out[fam] = max(out[fam], float(val))
    return out


def kkt_residuals(scenario: Scenario, alloc: Allocation, weights: Weights, multipliers=None,
                  context: dict | None = None) -> dict:
    """KKT residual summary of an allocation.

    The frequency/compression part is always checked (its multipliers have a
    closed form). The power/assignment part needs ``multipliers`` plus a
    ``context`` dict with keys X_ref, sigma, y, r_min, penalty (as stored in a
    PowerAssignReport).
    """
    rates = device_rates(scenario, alloc)
    rho_max = rho_upper_bound(scenario, rates)
    deadline = float(np.max(scenario.upload_bits / rates + scenario.compute_load / alloc.freq_hz))
    from .cpu_compression import CpuCompressionSolution
    sol = CpuCompressionSolution(alloc.freq_hz, alloc.rho, deadline,
                                 _deadline_multipliers(scenario, weights, alloc.freq_hz))
    flat = {"cpu_" + k: v for k, v in cpu_compression_kkt(scenario, alloc.device_power, rates, weights,
                                                           sol, rho_max, rho_floor=RHO_FLOOR).items()}
    if multipliers is not None and context is not None:
        res = power_assignment_kkt(scenario, alloc.power_w, alloc.assign, context["X_ref"], context["sigma"],
                                   context["y"], multipliers, alloc.rho, context["r_min"],
                                   context.get("penalty", 0.0), weights.kappa1,
                                   freeze_assign=context.get("freeze_assign", True))
        flat.update({"power_" + k: v for k, v in res.items()})
    flat.update({"primal_" + k + "_violation": v for k, v in constraint_violations(scenario, alloc).items()
                 if k != "binary"})
    summary = summarize_kkt(flat)
    summary["detail"] = flat
    return summary


BASELINES = {
    "equal": lambda sc, w, seed: equal_allocation(sc),
    "comm_only": lambda sc, w, seed: comm_only(sc, w, seed),
    "comp_only": lambda sc, w, seed: comp_only(sc, w),
    "random": lambda sc, w, seed: random_allocation(sc, seed),
}
