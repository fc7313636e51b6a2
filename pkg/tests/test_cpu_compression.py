import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ofdma_alloc.baselines import brute_force_cpu_compression
from ofdma_alloc.cpu_compression import (RHO_FLOOR, deadline_residual, objective_terms, rho_gradient,
                                         rho_upper_bound, solve_cpu_compression, solve_deadline, solve_rho)
from ofdma_alloc.errors import InfeasibleError
from ofdma_alloc.metrics import Allocation, Weights, device_rates
from ofdma_alloc.scenario import SystemConstants, generate_scenario

from conftest import tiny


def test_rho_upper_bound():
    sc = tiny()
    assert rho_upper_bound(sc, [1e12]) == 1.0
    assert rho_upper_bound(sc, [1e6]) == pytest.approx(20e6 / 4.15e7)
    two = tiny(n=2, k=2)
    c = 4.15e7 / 20
    assert rho_upper_bound(two, [0.9 * c, 0.3 * c]) == pytest.approx(0.3)
    with pytest.raises(InfeasibleError):
        rho_upper_bound(sc, [0.0])


def test_rho_edge_weights():
    sc = tiny()
    assert solve_rho(sc, [0.1], [1e6], Weights(0.0, 1.0, 1.0), 0.4) == 0.4
    assert solve_rho(sc, [0.1], [1e6], Weights(1.0, 1.0, 0.0), 0.4) == RHO_FLOOR
    with pytest.raises(InfeasibleError):
        solve_rho(sc, [0.1], [1e6], Weights(), RHO_FLOOR)


def test_rho_root_matches_closed_form_and_grid():
    # kappa1 p C / r = 0.1 and one device: root of 0.1 = A'(rho)
    sc = tiny()
    r = 4.15e7      # p = 0.1 W, C = 4.15e7 bits -> energy slope 0.1
    rho = solve_rho(sc, [0.1], [r], Weights(), 1.0)
    closed = (0.1 / (0.6356 * 0.4025)) ** (1 / (0.4025 - 1))
    assert rho == pytest.approx(min(closed, 1.0), abs=1e-10)
    grid = np.arange(1, 1_000_001) * 1e-6
    vals = 0.1 * grid - 0.6356 * grid ** 0.4025
    assert abs(rho - grid[np.argmin(vals)]) <= 1e-6


def test_deadline_closed_form():
    sc = tiny(cycles=1e8 / (10 * 500), f_max_hz=1e30)
    T = solve_deadline(sc, [0.0], Weights(1.0, 1.0, 0.0))
    assert T == pytest.approx(1e8 * (2e-28) ** (1 / 3), rel=1e-8)
    assert T == pytest.approx(0.0585, abs=1e-4)
    assert solve_deadline(sc, [0.0], Weights(1.0, 2.0, 0.0)) < T


def test_deadline_where_caps_release_matches_grid_scan():
    # f_max low enough that every device starts capped
    sc = tiny(n=3, k=3, cycles=[1e4, 2e4, 3e4], f_max_hz=1e8)
    taus = np.array([0.01, 0.02, 0.005])
    w = Weights(1.0, 1e-4, 0.0)
    T = solve_deadline(sc, taus, w)
    # independent scan of the residual on a 1 us grid
    grid = np.arange(taus.max() + 1e-6, 4.0, 1e-6)
    f = np.minimum(sc.compute_load[None, :] / (grid[:, None] - taus[None, :]), 1e8)
    F = np.sum(2 * 1e-28 * f ** 3, axis=1) - 1e-4
    assert F[0] > 0 and F[-1] < 0
    first = grid[np.argmax(F <= 0)]
    assert first - 1e-6 <= T <= first + 1e-9 * first


@given(st.floats(0.0, 0.1), st.floats(1e-3, 10.0))
@settings(max_examples=50, deadline=None)
def test_deadline_residual_non_increasing(tau, k2):
    sc = tiny(n=2, k=2, cycles=[1e4, 3e4])
    w = Weights(1.0, k2, 0.0)
    Ts = np.linspace(tau + 1e-4, tau + 2.0, 200)
    F = [deadline_residual(sc, [tau, tau / 2], w, t) for t in Ts]
    assert np.all(np.diff(F) <= 1e-15)


def _alloc(sc, seed=0):
    rng = np.random.default_rng(seed)
    X = np.eye(sc.n, sc.k) if sc.k >= sc.n else None
    P = X * rng.uniform(0.02, 0.1, size=(sc.n, 1))
    return Allocation(np.full(sc.n, 1e9), P, X, 0.5)


def test_all_capped_returns_f_max():
    sc = tiny(n=2, k=2, gains=1e-9, f_max_hz=1e7)
    X = np.eye(2)
    alloc = Allocation(np.full(2, 1e6), 0.05 * X, X, 0.5)
    sol = solve_cpu_compression(sc, alloc, Weights())
    assert np.all(sol.freq_hz == 1e7)
    rates = device_rates(sc, alloc)
    assert sol.deadline_s == pytest.approx(np.max(sc.upload_bits / rates + sc.compute_load / 1e7))


def test_symmetric_devices_get_the_same_frequency():
    sc = tiny(n=2, k=2, gains=1e-9)
    X = np.eye(2)
    sol = solve_cpu_compression(sc, Allocation(np.full(2, 1e9), 0.05 * X, X, 0.5), Weights())
    assert sol.freq_hz[0] == pytest.approx(sol.freq_hz[1], rel=1e-12)


def test_kappa2_zero_uses_frequency_floor():
    sc = tiny(gains=1e-9)
    sol = solve_cpu_compression(sc, _alloc(sc), Weights(1.0, 0.0, 1.0))
    assert sol.freq_hz[0] == 1e7


@pytest.mark.parametrize("seed", range(5))
def test_three_device_instance_matches_dense_grid(seed):
    sc = generate_scenario(SystemConstants(n_devices=3, n_subcarriers=3), seed)
    X = np.eye(3)
    alloc = Allocation(np.full(3, 1e9), 0.1 * X, X, 0.5)
    w = Weights()
    sol = solve_cpu_compression(sc, alloc, w)
    rates = device_rates(sc, alloc)
    mine = objective_terms(sc, alloc.device_power, rates, w, sol.freq_hz, sol.rho)
    best, freq, rho, tol = brute_force_cpu_compression(sc, alloc, w)
    assert mine <= best + 1e-12 * abs(best)
    assert best - mine <= tol
    assert abs(sol.rho - rho) <= 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_three_device_frequencies_match_deadline_scan(seed):
    # the 1 MHz frequency grid cannot make devices finish together, so its
    # argmin wanders along a flat valley; scan the shared deadline instead
    sc = generate_scenario(SystemConstants(n_devices=3, n_subcarriers=3), seed)
    X = np.eye(3)
    alloc = Allocation(np.full(3, 1e9), 0.1 * X, X, 0.5)
    sol = solve_cpu_compression(sc, alloc, Weights())
    taus = sc.upload_bits / device_rates(sc, alloc)
    load = sc.compute_load
    t_min = np.max(taus + load / 2e9)
    T = np.arange(t_min, 3 * t_min, 1e-6)
    f = np.minimum(load[None, :] / (T[:, None] - taus[None, :]), 2e9)
    cost = np.sum(1e-28 * load * f ** 2, axis=1) + np.max(taus + load / f, axis=1)
    i = int(np.argmin(cost))
    assert abs(sol.deadline_s - T[i]) <= 1e-6
    assert np.all(np.abs(sol.freq_hz - f[i]) <= 1e6)


@pytest.mark.parametrize("seed", range(10))
def test_kkt_residuals_small(seed):
    sc = generate_scenario(SystemConstants(), seed)
    X = np.zeros((10, 50))
    X[np.arange(50) % 10, np.arange(50)] = 1
    alloc = Allocation(np.full(10, 1e9), X * 0.02, X, 0.5)
    sol = solve_cpu_compression(sc, alloc, Weights())
    res = sol.kkt_residuals
    assert res["deadline_stationarity"] <= 1e-6
    assert res["freq_stationarity"] <= 1e-6
    assert res["rho_stationarity"] <= 1e-6
    assert res["deadline_slackness"] <= 1e-8
    assert res["cap_dual_feasibility"] <= 1e-6


def test_never_worse_than_input():
    sc = generate_scenario(SystemConstants(), 2)
    X = np.zeros((10, 50))
    X[np.arange(50) % 10, np.arange(50)] = 1
    alloc = Allocation(np.full(10, 1e9), X * 0.02, X, 0.1)
    rates = device_rates(sc, alloc)
    w = Weights()
    sol = solve_cpu_compression(sc, alloc, w)
    before = objective_terms(sc, alloc.device_power, rates, w, alloc.freq_hz, alloc.rho)
    after = objective_terms(sc, alloc.device_power, rates, w, sol.freq_hz, sol.rho)
    assert after <= before


@given(st.floats(1e-3, 0.999), st.floats(1e-3, 0.999))
@settings(max_examples=50)
def test_rho_gradient_increasing(a, b):
    sc = tiny()
    lo, hi = sorted((a, b))
    g = lambda r: rho_gradient(sc, [0.1], [1e7], Weights(), r)
    assert g(lo) <= g(hi) + 1e-12
