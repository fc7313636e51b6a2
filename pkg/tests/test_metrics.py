import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofdma_alloc.errors import InfeasibleError
from ofdma_alloc.metrics import (Allocation, Weights, accuracy, accuracy_derivative, constraint_violations,
                                 device_rate, fl_costs, link_rate, objective, semcom_costs)

from conftest import tiny

N0 = 3.981e-21


def test_link_rate_example():
    assert link_rate(0.1, 1e-10, 4e5, N0) == pytest.approx(5.047e6, rel=1e-3)
    assert link_rate(0.0, 1e-10, 4e5, N0) == 0.0


def test_link_rate_less_than_doubles_with_bandwidth():
    assert link_rate(0.1, 1e-10, 8e5, N0) < 2 * link_rate(0.1, 1e-10, 4e5, N0)


def test_link_rate_rejects_negative_power():
    with pytest.raises(ValueError):
        link_rate(-1e-3, 1e-10, 4e5, N0)


def test_device_rate_is_linear_in_assignment():
    sc = tiny(noise_psd_w_per_hz=N0, total_bandwidth_hz=4e5)
    assert device_rate([0.0], [0.1], sc, 0) == 0.0
    assert device_rate([1.0], [0.1], sc, 0) == pytest.approx(5.047e6, rel=1e-3)
    assert device_rate([0.5], [0.1], sc, 0) == pytest.approx(2.5235e6, rel=1e-3)


def _single(rho=1.0, f=1e9):
    sc = tiny(noise_psd_w_per_hz=N0, total_bandwidth_hz=4e5)
    return sc, Allocation(np.array([f]), np.array([[0.1]]), np.array([[1.0]]), rho)


def test_fl_costs_example():
    sc, alloc = _single()
    tau, t_cmp, e_tx, e_cmp = fl_costs(sc, alloc)
    assert t_cmp[0] == pytest.approx(0.1)
    assert e_cmp[0] == pytest.approx(0.01)
    assert tau[0] == pytest.approx(5.568e-3, rel=1e-3)
    assert e_tx[0] == pytest.approx(0.1 * tau[0])


def test_semcom_costs_example():
    sc, alloc = _single()
    assert sc.semcom_bits[0] == pytest.approx(4.15e7)
    t, e = semcom_costs(sc, alloc)
    assert t[0] == pytest.approx(8.223, rel=1e-3)
    assert e[0] == pytest.approx(0.8223, rel=1e-3)
    t0, e0 = semcom_costs(sc, Allocation(alloc.freq_hz, alloc.power_w, alloc.assign, 0.0))
    assert t0[0] == 0.0 and e0[0] == 0.0


def test_zero_rate_with_data_is_infeasible():
    sc, alloc = _single()
    alloc.assign[:] = 0.0
    with pytest.raises(InfeasibleError):
        fl_costs(sc, alloc)


def test_accuracy_values():
    assert accuracy(0.5) == pytest.approx(0.6356 * 2 ** -0.4025)
    assert accuracy(0.5) == pytest.approx(0.4808, abs=1e-4)
    assert accuracy(1.0) == pytest.approx(0.6356)
    assert accuracy_derivative(0.0) == math.inf


@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), st.floats(0.0, 1.0))
def test_accuracy_is_concave(a, b, t):
    mid = accuracy(t * a + (1 - t) * b)
    assert mid >= t * accuracy(a) + (1 - t) * accuracy(b) - 1e-12


@given(st.floats(1e-3, 0.999))
def test_accuracy_derivative_matches_difference_quotient(r):
    h = 1e-7
    fd = (accuracy(r + h) - accuracy(r - h)) / (2 * h)
    assert accuracy_derivative(r) == pytest.approx(fd, rel=1e-5)


def test_objective_kappa3_only():
    sc = tiny(n=10, k=10)
    X = np.eye(10)
    alloc = Allocation(np.full(10, 1e9), 0.1 * X, X, 1.0)
    value, _ = objective(sc, alloc, Weights(0.0, 0.0, 1.0))
    assert value == pytest.approx(-6.356)


def test_objective_single_device_by_hand():
    sc, alloc = _single()
    snr = 0.1 * 1e-10 / (N0 * 4e5)
    r = 4e5 * math.log2(1 + snr)
    tau = 2.81e4 / r
    e = 0.1 * tau + 1e-28 * 10 * 2e4 * 500 * 1e18 + 0.1 * 4.15e7 / r
    t_fl = tau + 0.1
    expect = 1.0 * e + 2.0 * t_fl - 3.0 * 0.6356
    value, br = objective(sc, alloc, Weights(1.0, 2.0, 3.0))
    assert value == pytest.approx(expect, rel=1e-12)
    assert br.total_energy_j == pytest.approx(e, rel=1e-12)


def test_objective_without_traffic():
    sc = tiny(model_upload_bits=0.0, semcom_bits_per_round=0.0)
    alloc = Allocation(np.array([1e9]), np.array([[0.0]]), np.array([[0.0]]), 0.5)
    value, br = objective(sc, alloc, Weights())
    assert br.e_fl_tx_j[0] == 0.0 and br.e_sc_j[0] == 0.0
    assert value == pytest.approx(0.01 + 0.1 - accuracy(0.5))


def test_constraint_violations_flag_each_breach():
    sc, alloc = _single()
    assert max(constraint_violations(sc, alloc).values()) == 0.0
    bad = alloc.copy()
    bad.power_w[:] = 0.2
    bad.freq_hz[:] = 3e9
    bad.assign[:] = 0.5
    v = constraint_violations(sc, bad)
    assert v["power_total"] > 0 and v["power_link"] > 0 and v["freq"] > 0 and v["binary"] == 0.5
