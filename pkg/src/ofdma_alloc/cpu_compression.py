"""CPU frequency, compression rate and FL deadline for a fixed power/assignment.

With P and X frozen the uplink rates are constants, and the problem splits:
the compression rate only trades semantic-transfer energy against accuracy,
while frequencies trade computation energy against the round deadline.
Both halves reduce to one-dimensional monotone root finds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .errors import InfeasibleError
from .metrics import Allocation, Weights, curve_for, device_rates
from .scenario import Scenario

RHO_FLOOR = 1e-4
F_FLOOR_HZ = 1e7
RHO_XTOL = 1e-12
T_RTOL = 1e-9
MAX_ITER = 200


@dataclass
class CpuCompressionSolution:
    freq_hz: np.ndarray
    rho: float
    deadline_s: float
    multiplier_mu: np.ndarray
    kkt_residuals: dict = field(default_factory=dict)
    root_deadline_s: float = float("nan")   # root of the deadline equation before clamping


def rho_upper_bound(scenario: Scenario, rates) -> float:
    """Largest rho that still meets the semantic-transfer deadline on every device."""
    rates = np.asarray(rates, dtype=float)
    bad = np.flatnonzero(rates <= 0)
    if bad.size:
        raise InfeasibleError(f"device {bad[0]} has zero rate", device=int(bad[0]))
    c = scenario.constants
    bits = scenario.semcom_bits
    if not np.any(bits > 0):
        return 1.0
    return float(min(1.0, np.min(c.t_semcom_max_s * rates / bits)))


def energy_per_rho(scenario: Scenario, powers, rates, weights: Weights) -> float:
    """kappa1 * sum_n p_n C_n / r_n: slope of weighted semantic energy in rho."""
    return float(weights.kappa1 * np.sum(np.asarray(powers) * scenario.semcom_bits / np.asarray(rates)))


def rho_gradient(scenario, powers, rates, weights, rho, curve=None) -> float:
    """Derivative of the rho-dependent objective part; increasing in rho."""
    curve = curve_for(scenario, curve)
    return energy_per_rho(scenario, powers, rates, weights) - weights.kappa3 * scenario.n * curve.derivative(rho)


def solve_rho(scenario: Scenario, powers, rates, weights: Weights, rho_max: float,
              curve=None, rho_floor: float = RHO_FLOOR) -> float:
    if rho_max <= rho_floor:
        raise InfeasibleError(f"rho range degenerate: rho_max={rho_max:.3e} <= floor {rho_floor:.0e}")
    if weights.kappa3 == 0:
        return rho_floor
    grad = lambda r: rho_gradient(scenario, powers, rates, weights, r, curve)
    if grad(rho_max) <= 0:
        return float(rho_max)
    if grad(rho_floor) >= 0:
        return float(rho_floor)
    return float(bisect(grad, rho_floor, rho_max, xtol=RHO_XTOL, rtol=4 * np.finfo(float).eps,
                        maxiter=MAX_ITER))


def deadline_residual(scenario: Scenario, taus, weights: Weights, T) -> float:
    """sum 2 kappa1 xi min(load/(T - tau), f_max)^3 - kappa2, non-increasing in T."""
    c = scenario.constants
    taus = np.asarray(taus, dtype=float)
    slack = T - taus
    with np.errstate(divide="ignore", over="ignore"):
        f = np.where(slack > 0, scenario.compute_load / np.where(slack > 0, slack, 1.0), np.inf)
    f = np.minimum(f, c.f_max_hz)
    return float(np.sum(2 * weights.kappa1 * c.switched_capacitance * f ** 3) - weights.kappa2)


def solve_deadline(scenario: Scenario, taus, weights: Weights) -> float:
    """Smallest T above max(tau) at which the deadline residual turns non-positive."""
    if weights.kappa2 <= 0 or weights.kappa1 <= 0:
        raise ValueError("solve_deadline needs kappa1 > 0 and kappa2 > 0")
    c = scenario.constants
    taus = np.asarray(taus, dtype=float)
    t_lo = float(taus.max())
    F = lambda T: deadline_residual(scenario, taus, weights, T)
    # just above t_lo the slowest uploader is pinned at f_max
    eps = max(abs(t_lo), 1e-300) * 1e-15
    if F(t_lo + eps) <= 0:
        return t_lo
    span = max(float(np.max(scenario.compute_load)) / c.f_max_hz, 1e-12)
    for _ in range(MAX_ITER):
        if F(t_lo + span) < 0:
            break
        span *= 2.0
    else:
        raise RuntimeError("deadline bracket expansion failed")
    t_hi = t_lo + span
    return float(bisect(F, t_lo + eps, t_hi, xtol=T_RTOL * t_hi, rtol=4 * np.finfo(float).eps,
                        maxiter=MAX_ITER))


def objective_terms(scenario: Scenario, powers, rates, weights: Weights, freq, rho, curve=None) -> float:
    """Objective restricted to what (f, rho) control, with the deadline set to the FL time."""
    c = scenario.constants
    curve = curve_for(scenario, curve)
    powers = np.asarray(powers, dtype=float)
    rates = np.asarray(rates, dtype=float)
    freq = np.asarray(freq, dtype=float)
    taus = scenario.upload_bits / rates
    load = scenario.compute_load
    e_cmp = c.switched_capacitance * load * freq ** 2
    t_fl = np.max(taus + load / freq)
    return float(weights.kappa1 * (e_cmp.sum() + rho * energy_per_rho(scenario, powers, rates, Weights(1, 0, 0)))
                 + weights.kappa2 * t_fl - weights.kappa3 * scenario.n * curve.value(rho))


def solve_cpu_compression(scenario: Scenario, alloc: Allocation, weights: Weights,
                          curve=None, rho_floor: float = RHO_FLOOR,
                          f_floor: float = F_FLOOR_HZ) -> CpuCompressionSolution:
    c = scenario.constants
    rates = device_rates(scenario, alloc)
    rho_max = rho_upper_bound(scenario, rates)
    powers = alloc.device_power
    rho = solve_rho(scenario, powers, rates, weights, rho_max, curve, rho_floor)

    taus = scenario.upload_bits / rates
    load = scenario.compute_load
    t_min = float(np.max(taus + load / c.f_max_hz))
    t_root = float("nan")
    if weights.kappa2 == 0:
        freq = np.full(scenario.n, min(f_floor, c.f_max_hz))
    elif weights.kappa1 == 0:
        freq = np.full(scenario.n, c.f_max_hz)
    else:
        t_root = solve_deadline(scenario, taus, weights)
        # below t_min some device cannot finish even at f_max; everyone else
        # then only has to meet the bottleneck's finishing time
        t_eff = max(t_root, t_min)
        freq = np.minimum(load / (t_eff - taus), c.f_max_hz)
    deadline = float(np.max(taus + load / freq))
    mu = _deadline_multipliers(scenario, weights, freq)
    sol = CpuCompressionSolution(freq, rho, deadline, mu, root_deadline_s=t_root)
    sol.kkt_residuals = cpu_compression_kkt(scenario, powers, rates, weights, sol, rho_max, curve, rho_floor)
    return sol


def _deadline_multipliers(scenario, weights, freq):
    c = scenario.constants
    mu = 2 * weights.kappa1 * c.switched_capacitance * freq ** 3
    capped = freq >= c.f_max_hz * (1 - 1e-12)
    if weights.kappa2 > 0 and weights.kappa1 > 0 and capped.any():
        # capped devices absorb what the unconstrained ones leave of kappa2
        rest = weights.kappa2 - mu[~capped].sum()
        mu[capped] = max(rest, 0.0) / capped.sum()
    return mu


def cpu_compression_kkt(scenario, powers, rates, weights, sol, rho_max, curve=None,
                        rho_floor: float = RHO_FLOOR) -> dict:
    """Stationarity / slackness magnitudes of the frequency-deadline-rho problem.

    Stationarity values are relative to kappa2 (deadline) or to the rho
    gradient scale; slackness is mu_n times the time slack in seconds.
    """
    c = scenario.constants
    taus = scenario.upload_bits / rates
    load = scenario.compute_load
    freq = sol.freq_hz
    mu = sol.multiplier_mu
    res = {}
    if weights.kappa1 > 0 and weights.kappa2 > 0:
        capped = freq >= c.f_max_hz * (1 - 1e-12)
        res["deadline_stationarity"] = abs(mu.sum() - weights.kappa2) / weights.kappa2
        # f-stationarity multiplier for the cap must be >= 0
        zeta = mu * load / freq ** 2 - 2 * weights.kappa1 * c.switched_capacitance * load * freq
        scale = 2 * weights.kappa1 * c.switched_capacitance * load * freq
        free_part = np.where(capped, 0.0, np.abs(zeta) / scale)
        res["freq_stationarity"] = float(free_part.max())
        res["cap_dual_feasibility"] = float(max(0.0, np.max(np.where(capped, -zeta / scale, 0.0))))
        res["deadline_slackness"] = float(np.max(np.abs(mu * (taus + load / freq - sol.deadline_s))))
    else:
        res["deadline_stationarity"] = 0.0
        res["freq_stationarity"] = 0.0
        res["cap_dual_feasibility"] = 0.0
        res["deadline_slackness"] = 0.0
    if weights.kappa3 > 0 and rho_max > rho_floor:
        curve = curve_for(scenario, curve)
        g = rho_gradient(scenario, powers, rates, weights, sol.rho, curve)
        scale = max(energy_per_rho(scenario, powers, rates, weights),
                    weights.kappa3 * scenario.n * curve.derivative(sol.rho), 1e-300)
        if sol.rho >= rho_max * (1 - 1e-12):
            res["rho_stationarity"] = max(0.0, g) / scale     # bound multiplier = -g >= 0
        elif sol.rho <= rho_floor * (1 + 1e-12):
            res["rho_stationarity"] = max(0.0, -g) / scale
        else:
            res["rho_stationarity"] = abs(g) / scale
    else:
        res["rho_stationarity"] = 0.0
    return res
