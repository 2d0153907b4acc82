"""Scenario and experiment configuration, loadable from YAML.

A config file has up to three top-level sections::

    scenario:    # system dimensions, powers, geometry and channel constants
    experiment:  # study, algorithms, sweeps, trial counts, seed, output
    ep:          # receiver settings (EPConfig fields)

Every key is optional; unknown keys are rejected so typos do not go unnoticed.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ep import EPConfig
from .model import ChannelModelParams, Constellation, GeometryConfig, SystemDims, dbm_to_watt

OUT_DIR_ENV = "CELLFREE_JCD_OUT"

ALGORITHMS = ("ep_mod", "ep_legacy", "mmse_pilot_csi", "mmse_perfect_csi", "genie_mmse")
PILOT_KINDS = ("hadamard", "dft")
STUDIES = ("ser_vs_power", "nmse_vs_power", "nmse_vs_iter", "cdf_ser", "cdf_nmse", "cdf_ck", "ser_vs_ck")

# (drops, realizations) at desk scale and at the full published scale
STUDY_SCALE = {
    "ser_vs_power": ((200, 1), (10_000, 1)),
    "nmse_vs_power": ((200, 1), (10_000, 1)),
    "nmse_vs_iter": ((200, 1), (10_000, 1)),
    "cdf_ser": ((100, 100), (1000, 1000)),
    "cdf_nmse": ((100, 100), (1000, 1000)),
    "ser_vs_ck": ((100, 100), (1000, 1000)),
    "cdf_ck": ((10_000, 1), (100_000, 1)),
}

DEFAULT_SWEEP = tuple(float(p) for p in np.arange(0.0, 20.0 + 1e-9, 2.0))
_STUDY_DEFAULTS = {
    "ser_vs_power": dict(powers=DEFAULT_SWEEP, Td=(10, 30)),
    "nmse_vs_power": dict(powers=DEFAULT_SWEEP, Td=(10, 30)),
    "nmse_vs_iter": dict(powers=(16.0,), Td=(10,)),
    "cdf_ser": dict(powers=(16.0,), Td=(10, 30)),
    "cdf_nmse": dict(powers=(16.0,), Td=(10, 30)),
    "ser_vs_ck": dict(powers=(16.0,), Td=(30,)),
    "cdf_ck": dict(powers=(16.0,), Td=(0,)),
}


@dataclass
class ScenarioConfig:
    K: int = 8
    N: int = 1
    T_p: int = 4
    noise_dbm: float = -96.0
    constellation: str = "qam4"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    channel: ChannelModelParams = field(default_factory=ChannelModelParams)

    @property
    def L(self) -> int:
        return int(np.prod(self.geometry.ap_grid))

    @property
    def sigma_n2(self) -> float:
        return float(dbm_to_watt(self.noise_dbm))

    def dims(self, T_d: int) -> SystemDims:
        return SystemDims(self.L, self.N, self.K, self.T_p, T_d)

    def make_constellation(self, power_dbm: float) -> Constellation:
        if self.constellation != "qam4":
            raise ValueError(f"unsupported constellation {self.constellation!r}")
        return Constellation.qam4(float(dbm_to_watt(power_dbm)))


@dataclass
class ExperimentConfig:
    """One Monte Carlo study. ``None`` fields take study-specific defaults
    (see :meth:`resolved`)."""

    study: str = "ser_vs_power"
    algorithms: tuple[str, ...] | None = None
    pilots: tuple[str, ...] = PILOT_KINDS
    powers_dbm: tuple[float, ...] | None = None
    Td: tuple[int, ...] | None = None
    drops: int | None = None
    realizations: int | None = None
    full_scale: bool = False
    trace: bool | None = None  # per-iteration NMSE traces of the EP runs
    seed: int = 0
    workers: int = 1
    out_dir: str = "results"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    ep: EPConfig = field(default_factory=EPConfig)

    def resolved(self) -> "ExperimentConfig":
        """Copy with defaults filled in and every field validated."""
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}; choose from {', '.join(STUDIES)}")
        d = _STUDY_DEFAULTS[self.study]
        desk, full = STUDY_SCALE[self.study]
        drops, reals = full if self.full_scale else desk
        if self.algorithms is not None:
            algs = tuple(self.algorithms)
        else:
            algs = () if self.study == "cdf_ck" else ALGORITHMS
        out = dataclasses.replace(
            self,
            algorithms=algs,
            pilots=tuple(self.pilots),
            powers_dbm=tuple(float(p) for p in (self.powers_dbm if self.powers_dbm is not None else d["powers"])),
            Td=tuple(int(t) for t in (self.Td if self.Td is not None else d["Td"])),
            drops=int(self.drops if self.drops is not None else drops),
            realizations=int(self.realizations if self.realizations is not None else reals),
            trace=bool(self.trace if self.trace is not None else self.study == "nmse_vs_iter"),
        )
        out.validate()
        return out

    def validate(self) -> None:
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithm(s) {bad}; choose from {', '.join(ALGORITHMS)}")
        if not self.algorithms and self.study != "cdf_ck":
            raise ValueError(f"study {self.study!r} needs at least one algorithm")
        bad = [p for p in self.pilots if p not in PILOT_KINDS]
        if bad or not self.pilots:
            raise ValueError(f"invalid pilot list {list(self.pilots)}; choose from {', '.join(PILOT_KINDS)}")
        if self.drops < 1 or self.realizations < 1:
            raise ValueError(f"trial counts must be >= 1, got {self.drops}x{self.realizations}")
        if not self.powers_dbm:
            raise ValueError("power sweep is empty")
        if not self.Td or any(t < 0 for t in self.Td):
            raise ValueError(f"invalid data lengths {list(self.Td)}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for t in self.Td:
            self.scenario.dims(t)  # raises on an invalid block partition


def parse_power_sweep(text: str) -> tuple[float, ...]:
    """``"a:b:step"`` (inclusive of ``b``) or a comma-separated list."""
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise ValueError(f"power sweep must be start:stop:step with step > 0, got {text!r}")
        a, b, s = parts
        n = int(np.floor((b - a) / s + 1e-9)) + 1
        return tuple(float(a + i * s) for i in range(n))
    return tuple(float(p) for p in text.split(",") if p.strip())


def parse_trials(text: str) -> tuple[int, int]:
    """``"DxR"`` (``x``, ``X`` or ``×``) or a bare drop count."""
    for sep in ("×", "x", "X"):
        if sep in text:
            d, r = text.split(sep)
            return int(d), int(r)
    return int(text), 1


def _build(cls, data: dict | None, section: str):
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ValueError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    for k, v in data.items():
        if isinstance(v, list):
            data[k] = tuple(v)
    return cls(**data)


def scenario_from_dict(data: dict | None) -> ScenarioConfig:
    data = dict(data or {})
    geom = _build(GeometryConfig, data.pop("geometry", None), "scenario.geometry")
    chan = _build(ChannelModelParams, data.pop("channel", None), "scenario.channel")
    return _build(ScenarioConfig, {**data, "geometry": geom, "channel": chan}, "scenario")


def experiment_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - {"scenario", "experiment", "ep"})
    if unknown:
        raise ValueError(f"unknown top-level section(s): {', '.join(unknown)}")
    exp = dict(data.get("experiment") or {})
    if isinstance(exp.get("powers_dbm"), str):
        exp["powers_dbm"] = parse_power_sweep(exp["powers_dbm"])
    if isinstance(exp.get("trials"), str):
        exp["drops"], exp["realizations"] = parse_trials(exp.pop("trials"))
    exp["scenario"] = scenario_from_dict(data.get("scenario"))
    exp["ep"] = _build(EPConfig, data.get("ep"), "ep")
    return _build(ExperimentConfig, exp, "experiment")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open() as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return experiment_from_dict(data)
