"""Problem instances: device placement, channel gains and system constants.

All quantities are linear SI units (W, Hz, s, bits, J). dBm only appears in
the two conversion helpers below and at the config boundary.

Randomness comes from ``numpy.random.default_rng(seed)``, i.e. a PCG64 bit
generator. Draw order inside :func:`generate_scenario` is fixed (radii,
shadowing, cycles) so a seed maps to the same instance across runs.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

# Devices closer than this are pushed out to it; the log-distance model
# is meaningless at d -> 0.
MIN_DISTANCE_M = 1.0


def dbm_to_watts(x):
    """10^((x - 30)/10). Works on scalars and arrays."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("dBm value must be finite")
    out = 10.0 ** ((x - 30.0) / 10.0)
    return float(out) if out.ndim == 0 else out


def watts_to_dbm(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError(f"watts_to_dbm needs a positive finite power, got {x}")
    out = 10.0 * np.log10(x) + 30.0
    return float(out) if out.ndim == 0 else out


def path_loss_db(distance_m, shadow_db=0.0):
    """Urban macro model: 128.1 + 37.6 log10(d [km]) plus shadowing."""
    d_km = np.asarray(distance_m, dtype=float) / 1000.0
    return 128.1 + 37.6 * np.log10(d_km) + shadow_db


@dataclass(frozen=True)
class SystemConstants:
    n_devices: int = 10
    n_subcarriers: int = 50
    total_bandwidth_hz: float = 20e6
    noise_psd_w_per_hz: float = 10.0 ** ((-174.0 - 30.0) / 10.0)
    cell_radius_m: float = 500.0
    shadow_std_db: float = 8.0
    model_upload_bits: float = 2.81e4       # per device, per FL round
    samples_per_device: float = 500.0
    cycles_per_sample_lo: float = 1e4
    cycles_per_sample_hi: float = 3e4
    switched_capacitance: float = 1e-28
    local_iterations: float = 10.0
    f_max_hz: float = 2e9
    p_max_w: float = 0.1                    # 20 dBm
    semcom_rounds: int = 10
    semcom_bits_per_round: float = 4.15e6
    t_semcom_max_s: float = 20.0
    taylor_power_q: int = 2
    accuracy_coeff: float = 0.6356
    accuracy_exponent: float = 0.4025
    # draw one shadowing value per (device, subcarrier) instead of per device
    per_subcarrier_shadowing: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def subcarrier_bandwidth_hz(self) -> float:
        return self.total_bandwidth_hz / self.n_subcarriers

    @property
    def semcom_bits(self) -> float:
        """Total semantic payload per device over all rounds."""
        return self.semcom_rounds * self.semcom_bits_per_round

    def replace(self, **changes) -> "SystemConstants":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        def need(ok, name, why):
            if not ok:
                raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})", field=name)

        for name in ("n_devices", "n_subcarriers", "semcom_rounds", "taylor_power_q"):
            v = getattr(self, name)
            need(isinstance(v, (int, np.integer)) and not isinstance(v, bool), name, "must be an integer")
        need(self.n_devices >= 1, "n_devices", "must be >= 1")
        need(self.n_subcarriers >= 1, "n_subcarriers", "must be >= 1")
        need(self.taylor_power_q >= 1, "taylor_power_q", "must be >= 1")
        need(self.semcom_rounds >= 0, "semcom_rounds", "must be >= 0")
        positive = (
            "total_bandwidth_hz", "noise_psd_w_per_hz", "cell_radius_m",
            "samples_per_device", "cycles_per_sample_lo", "cycles_per_sample_hi",
            "switched_capacitance", "local_iterations", "f_max_hz", "p_max_w",
            "t_semcom_max_s", "accuracy_coeff",
        )
        for name in positive:
            v = getattr(self, name)
            need(math.isfinite(v) and v > 0, name, "must be finite and > 0")
        for name in ("model_upload_bits", "semcom_bits_per_round", "shadow_std_db"):
            v = getattr(self, name)
            need(math.isfinite(v) and v >= 0, name, "must be finite and >= 0")
        need(self.cycles_per_sample_lo <= self.cycles_per_sample_hi,
             "cycles_per_sample_lo", "must not exceed cycles_per_sample_hi")
        need(0.0 < self.accuracy_exponent < 1.0, "accuracy_exponent", "must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class Scenario:
    constants: SystemConstants
    gains: np.ndarray                 # (N, K) linear power gain
    cycles_per_sample: np.ndarray     # (N,)
    distances_m: np.ndarray           # (N,)
    rng_seed: int = 0
    shadow_db: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("gains", "cycles_per_sample", "distances_m", "shadow_db"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        c = self.constants
        if self.gains.shape != (c.n_devices, c.n_subcarriers):
            raise ConfigError(f"gains must be {c.n_devices}x{c.n_subcarriers}", field="gains")
        if not np.all(self.gains > 0):
            raise ConfigError("every channel gain must be > 0", field="gains")

    @property
    def n(self) -> int:
        return self.constants.n_devices

    @property
    def k(self) -> int:
        return self.constants.n_subcarriers

    @property
    def compute_load(self) -> np.ndarray:
        """Cycles per local training pass: eta * c_n * d_n."""
        c = self.constants
        return c.local_iterations * self.cycles_per_sample * c.samples_per_device

    @property
    def upload_bits(self) -> np.ndarray:
        return np.full(self.n, self.constants.model_upload_bits)

    @property
    def semcom_bits(self) -> np.ndarray:
        return np.full(self.n, self.constants.semcom_bits)

    def with_constants(self, **changes) -> "Scenario":
        """Same geometry and gains, different scalar constants (not N or K)."""
        if "n_devices" in changes or "n_subcarriers" in changes:
            raise ConfigError("cannot change N or K on an existing scenario", field="n_devices")
        return dataclasses.replace(self, constants=self.constants.replace(**changes))


def generate_scenario(constants: SystemConstants, seed: int) -> Scenario:
    constants.validate()
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", field="seed")
    rng = np.random.default_rng(seed)
    n, k = constants.n_devices, constants.n_subcarriers

    # area-uniform in the disc
    radius = constants.cell_radius_m * np.sqrt(rng.random(n))
    radius = np.maximum(radius, MIN_DISTANCE_M)
    if constants.per_subcarrier_shadowing:
        shadow = rng.normal(0.0, constants.shadow_std_db, size=(n, k))
    else:
        shadow = np.repeat(rng.normal(0.0, constants.shadow_std_db, size=(n, 1)), k, axis=1)
    cycles = rng.uniform(constants.cycles_per_sample_lo, constants.cycles_per_sample_hi, size=n)

    pl = path_loss_db(radius[:, None], shadow)
    gains = 10.0 ** (-pl / 10.0)
    return Scenario(constants, gains, cycles, radius, rng_seed=seed, shadow_db=shadow)


def scenario_from_arrays(constants: SystemConstants, gains, cycles_per_sample,
                         distances_m=None) -> Scenario:
    """Hand-built instance, mainly for tests and small oracles."""
    gains = np.asarray(gains, dtype=float).reshape(constants.n_devices, constants.n_subcarriers)
    cycles = np.asarray(cycles_per_sample, dtype=float).reshape(constants.n_devices)
    if distances_m is None:
        distances_m = np.full(constants.n_devices, np.nan)
    return Scenario(constants, gains, cycles, np.asarray(distances_m, dtype=float))
