"""Experiment configuration: a line-based ``key = value`` file.

Every field of :class:`SystemConstants` is a key (SI units); a few keys take
dB/dBm instead and are converted here. Unknown keys, duplicates and bad
values are rejected with the offending line number. Absent keys keep their
defaults, so an empty file is the default setup.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .metrics import Weights
from .scenario import SystemConstants, dbm_to_watts

METHODS = ("proposed", "equal", "comm_only", "comp_only", "random", "oracle")
SWEEP_AXES = ("kappa1", "kappa2", "kappa3", "p_max_dbm", "n_devices", "n_subcarriers", "semcom_workload")

# keys given in logarithmic units -> (SystemConstants field, converter)
_LOG_KEYS = {
    "p_max_dbm": ("p_max_w", dbm_to_watts),
    "noise_psd_dbm_per_hz": ("noise_psd_w_per_hz", dbm_to_watts),
}


@dataclass
class ExperimentConfig:
    constants: SystemConstants = field(default_factory=SystemConstants)
    weights: Weights = field(default_factory=Weights)
    methods: tuple = ("proposed",)
    seed: int = 0
    n_seeds: int = 1
    axis: str | None = None
    values: tuple = ()
    semcom_workload: float = 1.0       # multiplier on the semantic payload per round
    eps2_rel: float = 1e-4
    j_max: int = 50
    eps1_rel: float = 1e-6
    i_max: int = 100
    jobs: int = 1
    out: str | None = None

    @property
    def seeds(self) -> list:
        return [self.seed + i for i in range(self.n_seeds)]

    def scaled_constants(self, constants: SystemConstants | None = None) -> SystemConstants:
        c = constants or self.constants
        if self.semcom_workload == 1.0:
            return c
        return c.replace(semcom_bits_per_round=c.semcom_bits_per_round * self.semcom_workload)


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text):
    return int(text, 10)


def _parse_list(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _parse_floats(text):
    return tuple(float(t) for t in _parse_list(text))


def _parse_methods(text):
    items = _parse_list(text)
    if items == ("all",):
        # the grid oracle only fits tiny instances; ask for it by name
        return tuple(m for m in METHODS if m != "oracle")
    for m in items:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r} (choose from {', '.join(METHODS)} or all)")
    return items


def _parse_axis(text):
    if text not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {text!r} (choose from {', '.join(SWEEP_AXES)})")
    return text


_CONST_TYPES = {f.name: f.type for f in dataclasses.fields(SystemConstants)}
_EXPERIMENT_KEYS = {
    "kappa1": float, "kappa2": float, "kappa3": float,
    "method": _parse_methods, "seed": _parse_int, "seeds": _parse_int,
    "axis": _parse_axis, "values": _parse_floats, "semcom_workload": float,
    "eps2_rel": float, "j_max": _parse_int, "eps1_rel": float, "i_max": _parse_int,
    "jobs": _parse_int, "out": str,
}


def _const_parser(name):
    t = _CONST_TYPES[name]
    if t in ("int", int):
        return _parse_int
    if t in ("bool", bool):
        return _parse_bool
    return float


def parse_config(text: str) -> ExperimentConfig:
    const_kw, exp_kw, seen = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("missing key before '='", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", field=key, line=lineno)
        seen[key] = lineno
        if key in _LOG_KEYS:
            target, conv = _LOG_KEYS[key]
            parser = lambda v, conv=conv: conv(float(v))
        elif key in _CONST_TYPES:
            target, parser = key, _const_parser(key)
        elif key in _EXPERIMENT_KEYS:
            target, parser = key, _EXPERIMENT_KEYS[key]
        else:
            raise ConfigError(f"unknown key {key!r}", field=key, line=lineno)
        try:
            parsed = parser(value)
        except (ValueError, ArithmeticError) as err:
            raise ConfigError(f"bad value for {key!r}: {err}", field=key, line=lineno) from None
        bucket = const_kw if (key in _LOG_KEYS or key in _CONST_TYPES) else exp_kw
        if target in bucket:
            raise ConfigError(f"{key!r} sets {target} a second time (line {seen.get(target)})",
                              field=key, line=lineno)
        bucket[target] = parsed
        seen.setdefault(target, lineno)

    try:
        constants = SystemConstants(**const_kw)
    except ConfigError as err:
        raise ConfigError(str(err), field=err.field, line=seen.get(err.field)) from None
    return build_config(constants, exp_kw, seen)


def build_config(constants: SystemConstants, kw: dict, lines: dict | None = None) -> ExperimentConfig:
    lines = lines or {}
    w = {k: kw.pop(k) for k in ("kappa1", "kappa2", "kappa3") if k in kw}
    try:
        weights = Weights(**w)
    except ValueError as err:
        bad = next((k for k in w if k in str(err)), None)
        raise ConfigError(str(err), field=bad, line=lines.get(bad)) from None
    cfg = ExperimentConfig(constants=constants, weights=weights)
    rename = {"method": "methods", "seeds": "n_seeds"}
    for key, val in kw.items():
        setattr(cfg, rename.get(key, key), val)
    validate_experiment(cfg, lines)
    return cfg


def validate_experiment(cfg: ExperimentConfig, lines: dict | None = None) -> None:
    lines = lines or {}

    def need(ok, key, why):
        if not ok:
            raise ConfigError(f"{key}: {why}", field=key, line=lines.get(key))

    need(0 <= cfg.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
    need(cfg.n_seeds >= 1, "seeds", "must be >= 1")
    need(cfg.semcom_workload > 0, "semcom_workload", "must be > 0")
    need(cfg.eps2_rel > 0 and cfg.eps1_rel > 0, "eps2_rel", "tolerances must be > 0")
    need(cfg.j_max >= 1 and cfg.i_max >= 1, "j_max", "iteration caps must be >= 1")
    need(cfg.jobs >= 1, "jobs", "must be >= 1")
    need(len(cfg.methods) >= 1, "method", "needs at least one method")
    if cfg.values:
        need(cfg.axis is not None, "values", "given without an axis")
    if cfg.axis in ("n_devices", "n_subcarriers"):
        need(all(float(v).is_integer() and v >= 1 for v in cfg.values), "values", "must be positive integers")


def load_config(path) -> ExperimentConfig:
    """Read and parse a config file; a missing file raises OSError."""
    return parse_config(Path(path).read_text(encoding="utf-8"))


def apply_axis(cfg: ExperimentConfig, axis: str, value: float):
    """(SystemConstants, Weights) for one point of a sweep."""
    c, w = cfg.constants, cfg.weights
    if axis in ("kappa1", "kappa2", "kappa3"):
        w = dataclasses.replace(w, **{axis: float(value)})
    elif axis == "p_max_dbm":
        c = c.replace(p_max_w=dbm_to_watts(float(value)))
    elif axis in ("n_devices", "n_subcarriers"):
        c = c.replace(**{axis: int(value)})
    elif axis == "semcom_workload":
        c = c.replace(semcom_bits_per_round=cfg.constants.semcom_bits_per_round * float(value))
        return c, w
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}", field="axis")
    return cfg.scaled_constants(c), w
