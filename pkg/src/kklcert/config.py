"""Run configuration: a TOML document with one table per pipeline stage.

Example::

    seed = 0
    out = "runs/duffing"

    [system]
    name = "reverse_duffing"      # or "van_der_pol" (mu = ...) or "linear" (F, H)

    [design]
    eigenvalues = [1, 2, 3, 4, 5] # A = -diag(eigenvalues)
    # B = [1, 1, 1, 1, 1]

    [training]
    p = 200
    horizon = 20.0

    [region]
    mode = "energy"
    x0_lower = [-1, -1]
    x0_upper = [1, 1]

    [bab]
    max_subboxes = 4096

    [noise]
    vbar = 0.0                    # absolute bound, or
    relative = 0.01               # fraction of the peak output seen in simulation

    [simulation]
    n_trajectories = 50
    horizon = 20.0
"""

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .certify import BabConfig, RegionSpec
from .dynamics import linear_system, make_system
from .linalg import ObserverDesign
from .training import ConfigError, TrainingConfig


@dataclass
class SystemSpec:
    name: str = "reverse_duffing"
    mu: float = 1.0
    F: Optional[list] = None
    H: Optional[list] = None

    def build(self):
        if self.name == "linear":
            if self.F is None or self.H is None:
                raise ConfigError("system 'linear' needs F and H")
            return linear_system(self.F, self.H)
        if self.name == "van_der_pol":
            return make_system(self.name, mu=self.mu)
        try:
            return make_system(self.name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class DesignSpec:
    eigenvalues: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0])
    B: Optional[list] = None

    def build(self, n_y=1):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0 or np.any(lam <= 0):
            raise ConfigError("design.eigenvalues must be a non-empty list of positive rates")
        B = np.ones((lam.size, n_y)) if self.B is None else np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if B.shape != (lam.size, n_y):
            raise ConfigError(f"design.B must have shape ({lam.size}, {n_y})")
        return ObserverDesign.diagonal(lam, B)


@dataclass
class NoiseConfig:
    vbar: float = 0.0
    relative: float = 0.0
    seed: int = 0

    def validate(self):
        if self.vbar < 0 or self.relative < 0:
            raise ConfigError("noise bounds must be non-negative")
        if self.vbar > 0 and self.relative > 0:
            raise ConfigError("set either noise.vbar or noise.relative, not both")


@dataclass
class SimulationConfig:
    n_trajectories: int = 50
    horizon: float = 20.0
    dt: float = 1e-3
    transient: Optional[float] = None      # None -> 5 / lambda_min(A)
    record_every: int = 10
    x0_lower: Optional[list] = None        # None -> region.x0 box
    x0_upper: Optional[list] = None

    def validate(self):
        if self.n_trajectories < 1 or self.horizon <= 0 or self.dt <= 0 or self.record_every < 1:
            raise ConfigError("simulation settings must be positive")


@dataclass
class RunConfig:
    system: SystemSpec = field(default_factory=SystemSpec)
    design: DesignSpec = field(default_factory=DesignSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    bab: BabConfig = field(default_factory=BabConfig)
    region: RegionSpec = field(default_factory=lambda: RegionSpec(x0_lower=[-1.0, -1.0],
                                                                  x0_upper=[1.0, 1.0]))
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    seed: int = 0
    out: str = "run"
    exact_linear: bool = False   # use the closed-form observer instead of training

    def validate(self):
        self.training.seed = self.seed
        self.bab.seed = self.seed
        self.training.validate()
        self.noise.validate()
        self.simulation.validate()
        if self.region.x0_lower is None or self.region.x0_upper is None:
            raise ConfigError("region.x0_lower and region.x0_upper are required")
        if self.exact_linear and self.system.name != "linear":
            raise ConfigError("exact_linear requires system.name = 'linear'")
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


_SECTIONS = {"system": SystemSpec, "design": DesignSpec, "training": TrainingConfig,
             "bab": BabConfig, "region": RegionSpec, "noise": NoiseConfig,
             "simulation": SimulationConfig}


def _build(cls, table, section):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def config_from_dict(doc):
    doc = dict(doc)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        table = doc.pop(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(cls, table, name)
    top = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs.update(doc)
    return RunConfig(**kwargs).validate()


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return config_from_dict(doc)
