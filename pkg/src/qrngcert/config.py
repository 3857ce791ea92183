"""Run configuration: one TOML file with nested tables, every model parameter addressable by name.

Example::

    mode = "coherent"
    cutoff = 8
    epsilon = 1e-9
    r = 1.0

    [ensemble]
    n_states = 2
    alpha_bar = 0.3
    eta = 1.0

    [noise]
    snr_db = 15.0
    gamma = 0.0

    [bins]
    delta = 4
    R = 1.5

    [input]
    source = "model"
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .quadrature import BinningScheme, NoiseModel, ProbeEnsemble, equal_probability_edges, fixed_width_bins

SWEEP_AXES = ("snr_db", "delta", "n_states", "gamma", "R", "alpha_bar", "cutoff", "r", "eta")
SOURCES = ("model", "trc", "csv")
MODES = ("coherent", "tomo")


@dataclass
class EnsembleConfig:
    amplitudes: Optional[list] = None  # explicit list, first entry 0
    n_states: int = 2
    alpha_bar: float = 0.3
    eta: float = 1.0

    def build(self) -> ProbeEnsemble:
        if self.amplitudes:
            return ProbeEnsemble(tuple(float(a) for a in self.amplitudes), self.eta)
        return ProbeEnsemble.equally_spaced(self.n_states, self.alpha_bar, self.eta)


@dataclass
class NoiseConfig:
    snr_db: float = 15.0  # "inf" for no additive noise
    gamma: float = 0.0

    def build(self) -> NoiseModel:
        return NoiseModel.from_snr_db(float(self.snr_db), self.gamma)


@dataclass
class BinsConfig:
    delta: int = 4
    R: float = 1.5
    kind: str = "fixed"  # fixed | equal-probability

    def build(self, noise: Optional[NoiseModel] = None) -> BinningScheme:
        if self.kind == "fixed":
            return fixed_width_bins(self.delta, self.R)
        if self.kind == "equal-probability":
            sigma_t = noise.sigma_t if noise is not None else math.sqrt(0.5)
            return equal_probability_edges(2**self.delta, sigma_t)
        raise ValueError(f"unknown bin kind {self.kind!r}")


@dataclass
class InputConfig:
    source: str = "model"
    samples: int = 1_000_000  # per state, model source only
    shot: str = ""  # trc source
    traces: list = field(default_factory=list)
    csv: str = ""


@dataclass
class SweepConfig:
    axes: dict = field(default_factory=dict)
    optimize: bool = False
    rounds: int = 3
    xtol: float = 1e-3


@dataclass
class SimulateConfig:
    amplitudes: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    seed: int = 1
    n_samples: int = 1_000_000
    sample_rate_hz: float = 50e6
    f_mod_hz: float = 6e6
    df_hz: float = 0.0
    phase: float = 0.0
    adc_bits: int = 16
    adc_fullscale: float = 4.0


@dataclass
class SolverConfig:
    max_iter: int = 200
    feas_tol: float = 1e-9
    gap_tol: float = 1e-9


@dataclass
class RunConfig:
    mode: str = "coherent"
    cutoff: int = 8
    epsilon: float = 1e-9
    r: float = 1.0
    workers: int = 0  # 0: available parallelism
    out: str = "out"
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    bins: BinsConfig = field(default_factory=BinsConfig)
    input: InputConfig = field(default_factory=InputConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    audit_r: list = field(default_factory=lambda: [0.9, 1.0, 1.02, 1.05, 1.1])

    def validate(self, command: Optional[str] = None) -> "RunConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.input.source not in SOURCES:
            raise ValueError(f"input source must be one of {SOURCES}")
        if self.input.source == "trc" and not (self.input.shot and self.input.traces):
            raise ValueError("trc input needs a shot trace and probe traces")
        if self.input.source == "csv" and not self.input.csv:
            raise ValueError("csv input needs a file")
        unknown = set(self.sweep.axes) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}")
        if command == "sweep" and not self.sweep.axes:
            raise ValueError("sweep needs at least one axis")
        if command not in (None, "sweep") and self.sweep.axes:
            raise ValueError("sweep axes are only valid for the sweep command")
        if any(not v for v in self.sweep.axes.values()):
            raise ValueError("sweep axes must be nonempty")
        return self

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"noise.snr_db": 10}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        return from_dict(data)


def _clean(obj):
    # TOML has no null and no float infinities in tomli_w output as bare values
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _restore(value):
    if isinstance(value, list):
        return [_restore(v) for v in value]
    if value in ("inf", "-inf"):
        return float(value)
    return value


# fields that may hold an infinite value, written as the string "inf"
_NUMERIC = {"NoiseConfig": {"snr_db"}}


def _section(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
    data = dict(data)
    for k in _NUMERIC.get(cls.__name__, ()):
        if k in data:
            data[k] = _restore(data[k])
    if cls is SweepConfig and "axes" in data:
        data["axes"] = {k: _restore(v) for k, v in data["axes"].items()}
    return cls(**data)


_SECTIONS = {
    "ensemble": EnsembleConfig,
    "noise": NoiseConfig,
    "bins": BinsConfig,
    "input": InputConfig,
    "sweep": SweepConfig,
    "simulate": SimulateConfig,
    "solver": SolverConfig,
}


def from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    kw: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _section(cls, data.pop(name))
    top = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
    kw.update(data)
    return RunConfig(**kw)


def loads(text: str) -> RunConfig:
    return from_dict(tomllib.loads(text))


def load(path) -> RunConfig:
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))
