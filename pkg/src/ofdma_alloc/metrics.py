"""Cost model: link rates, FL and semantic-transfer time/energy, accuracy, objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError
from .scenario import Scenario

LN2 = np.log(2.0)


@dataclass
class Allocation:
    freq_hz: np.ndarray    # (N,)
    power_w: np.ndarray    # (N, K)
    assign: np.ndarray     # (N, K), in [0, 1]; binary once solved
    rho: float             # compression rate

    def copy(self) -> "Allocation":
        return Allocation(self.freq_hz.copy(), self.power_w.copy(), self.assign.copy(), float(self.rho))

    @property
    def device_power(self) -> np.ndarray:
        return self.power_w.sum(axis=1)


@dataclass(frozen=True)
class Weights:
    kappa1: float = 1.0   # 1/J
    kappa2: float = 1.0   # 1/s
    kappa3: float = 1.0

    def __post_init__(self):
        for name in ("kappa1", "kappa2", "kappa3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class CostBreakdown:
    rate_bps: np.ndarray
    tau_s: np.ndarray
    t_cmp_s: np.ndarray
    e_fl_tx_j: np.ndarray
    e_fl_cmp_j: np.ndarray
    t_sc_s: np.ndarray
    e_sc_j: np.ndarray
    t_fl_s: float
    accuracy_sum: float
    objective: float

    @property
    def total_energy_j(self) -> float:
        return float(self.e_fl_tx_j.sum() + self.e_fl_cmp_j.sum() + self.e_sc_j.sum())


@dataclass(frozen=True)
class PowerLawAccuracy:
    """A(rho) = coeff * rho**exponent, increasing and concave for 0 < exponent < 1."""
    coeff: float = 0.6356
    exponent: float = 0.4025

    def value(self, rho):
        return self.coeff * np.power(rho, self.exponent)

    def derivative(self, rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            d = np.where(rho > 0, self.coeff * self.exponent * np.power(np.where(rho > 0, rho, 1.0), self.exponent - 1.0), np.inf)
        return float(d) if d.ndim == 0 else d


def curve_for(scenario: Scenario, curve=None):
    if curve is not None:
        return curve
    c = scenario.constants
    return PowerLawAccuracy(c.accuracy_coeff, c.accuracy_exponent)


def accuracy(rho, coeff=0.6356, exponent=0.4025):
    return PowerLawAccuracy(coeff, exponent).value(rho)


def accuracy_derivative(rho, coeff=0.6356, exponent=0.4025):
    """+inf at rho = 0."""
    return PowerLawAccuracy(coeff, exponent).derivative(rho)


def link_rate(p, g, bbar, n0):
    """Shannon rate of one subcarrier in bits/s."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("power must be non-negative")
    r = bbar * np.log1p(p * g / (n0 * bbar)) / LN2
    return float(r) if np.ndim(r) == 0 else r


def link_rates(scenario: Scenario, power_w) -> np.ndarray:
    c = scenario.constants
    return link_rate(power_w, scenario.gains, c.subcarrier_bandwidth_hz, c.noise_psd_w_per_hz)


def device_rate(x_row, p_row, scenario: Scenario, n: int) -> float:
    c = scenario.constants
    r = link_rate(p_row, scenario.gains[n], c.subcarrier_bandwidth_hz, c.noise_psd_w_per_hz)
    return float(np.dot(x_row, r))


def device_rates(scenario: Scenario, alloc: Allocation) -> np.ndarray:
    return np.sum(alloc.assign * link_rates(scenario, alloc.power_w), axis=1)


def _check_rates(rates, bits):
    bad = np.flatnonzero((rates <= 0) & (bits > 0))
    if bad.size:
        raise InfeasibleError(f"device {bad[0]} has zero uplink rate but data to send", device=int(bad[0]))


def _safe_div(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)


def fl_costs(scenario: Scenario, alloc: Allocation, rates=None):
    """Per-device (tau, t_cmp, e_tx, e_cmp) for one FL round."""
    c = scenario.constants
    if rates is None:
        rates = device_rates(scenario, alloc)
    bits = scenario.upload_bits
    _check_rates(rates, bits)
    f = np.asarray(alloc.freq_hz, dtype=float)
    if np.any(f <= 0):
        raise ValueError("CPU frequency must be > 0")
    tau = _safe_div(bits, rates)
    e_tx = alloc.device_power * tau
    load = scenario.compute_load
    t_cmp = load / f
    e_cmp = c.switched_capacitance * load * f ** 2
    return tau, t_cmp, e_tx, e_cmp


def semcom_costs(scenario: Scenario, alloc: Allocation, rates=None):
    """Per-device (time, energy) of the semantic payload upload."""
    if rates is None:
        rates = device_rates(scenario, alloc)
    bits = alloc.rho * scenario.semcom_bits
    _check_rates(rates, bits)
    t_sc = _safe_div(bits, rates)
    return t_sc, alloc.device_power * t_sc


def objective(scenario: Scenario, alloc: Allocation, weights: Weights, curve=None):
    """Weighted energy + FL time - accuracy. Returns (value, CostBreakdown)."""
    curve = curve_for(scenario, curve)
    rates = device_rates(scenario, alloc)
    tau, t_cmp, e_tx, e_cmp = fl_costs(scenario, alloc, rates)
    t_sc, e_sc = semcom_costs(scenario, alloc, rates)
    t_fl = float(np.max(tau + t_cmp))
    acc = float(scenario.n * curve.value(alloc.rho))
    value = (weights.kappa1 * float(e_tx.sum() + e_cmp.sum() + e_sc.sum())
             + weights.kappa2 * t_fl - weights.kappa3 * acc)
    return value, CostBreakdown(rates, tau, t_cmp, e_tx, e_cmp, t_sc, e_sc, t_fl, acc, value)


def constraint_violations(scenario: Scenario, alloc: Allocation) -> dict:
    """Largest violation of each original constraint (0 when satisfied).

    Power and rate checks are relative to their caps, the rest absolute.
    """
    c = scenario.constants
    x, p = alloc.assign, alloc.power_w
    out = {}
    out["power_nonneg"] = float(max(0.0, -p.min()))
    out["power_link"] = float(max(0.0, np.max(p - x * c.p_max_w)) / c.p_max_w)
    out["power_total"] = float(max(0.0, np.max(p.sum(axis=1) - c.p_max_w)) / c.p_max_w)
    out["freq"] = float(max(0.0, np.max(alloc.freq_hz - c.f_max_hz)) / c.f_max_hz)
    out["freq_pos"] = float(max(0.0, -np.min(alloc.freq_hz)))
    out["exclusive"] = float(max(0.0, np.max(x.sum(axis=0) - 1.0)))
    out["binary"] = float(np.max(np.minimum(np.abs(x), np.abs(1.0 - x))))
    out["rho"] = float(max(0.0, alloc.rho - 1.0, -alloc.rho))
    rates = device_rates(scenario, alloc)
    need = alloc.rho * scenario.semcom_bits / c.t_semcom_max_s
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(need > 0, (need - rates) / np.where(need > 0, need, 1.0), 0.0)
    out["semcom_deadline"] = float(max(0.0, rel.max()))
    return out
