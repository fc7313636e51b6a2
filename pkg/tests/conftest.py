import sys

import numpy as np
import pytest

from ofdma_alloc.scenario import SystemConstants, generate_scenario, scenario_from_arrays


def tiny(n=1, k=1, gains=1e-10, cycles=2e4, **changes):
    """Hand-built instance with fixed gains and cycles (no randomness)."""
    c = SystemConstants(n_devices=n, n_subcarriers=k, **changes)
    g = np.broadcast_to(np.asarray(gains, dtype=float), (n, k)) if np.ndim(gains) < 2 else gains
    cyc = np.broadcast_to(np.asarray(cycles, dtype=float), (n,))
    return scenario_from_arrays(c, g, cyc)


@pytest.fixture
def toy():
    return generate_scenario(SystemConstants(n_devices=4, n_subcarriers=5), seed=3)


@pytest.fixture
def default_scenario():
    return generate_scenario(SystemConstants(), seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
