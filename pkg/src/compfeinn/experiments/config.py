"""Experiment configuration read from TOML files.

Each top-level table maps onto one dataclass below; unknown tables or keys
raise ``ConfigError`` so typos never fall back silently to defaults.
"""

from dataclasses import dataclass, field, fields, replace

import tomli

PROBLEM_KINDS = ("maxwell", "darcy_sphere", "inverse_maxwell")
OBS_MODES = ("partial", "noisy", "boundary")


class ConfigError(ValueError):
    pass


@dataclass
class ProblemConfig:
    kind: str = "maxwell"
    case: str = "smooth_maxwell"
    order: int = 1
    test: str = "linearized"
    depth: int = 3
    width: int = 30
    activation: str = "tanh"
    kappa_depth: int = 2
    kappa_width: int = 20
    kappa_activation: str = "softplus"
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class MeshConfig:
    n: int = 8
    sizes: list = field(default_factory=list)
    ne: int = 4
    fine_factor: int = 4
    fine_order: int = 2
    mark_fraction: float = 0.1


@dataclass
class LossConfig:
    kind: str = "ResidualL2"
    norm: str = "Unorm"
    squared: bool = False


@dataclass
class ScheduleConfig:
    datafit: int = 0
    pde: int = 2000
    fit: int = 150
    coeff: int = 50
    composite: list = field(default_factory=lambda: [600, 600, 600])
    alphas: list = field(default_factory=lambda: [0.001, 0.003, 0.009])
    refinements: list = field(default_factory=list)
    max_linesearch: int = 30


@dataclass
class ObservationConfig:
    mode: str = "partial"
    n: int = 30
    components: list = field(default_factory=lambda: [True, False])
    sigma: float = 0.0
    lo: float = 0.005
    hi: float = 0.995
    inset: float = 0.005
    noise_seed: int = 0


@dataclass
class OutputConfig:
    dir: str = "out"
    vtk: bool = False
    figures: bool = False
    error_quadrature: int = 0
    history_every: int = 10


@dataclass
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    observations: ObservationConfig = field(default_factory=ObservationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        p = self.problem
        if p.kind not in PROBLEM_KINDS:
            raise ConfigError(f"problem.kind must be one of {PROBLEM_KINDS}, got {p.kind!r}")
        if p.order < 1:
            raise ConfigError("problem.order must be >= 1")
        if p.test not in ("linearized", "galerkin"):
            raise ConfigError(f"problem.test must be 'linearized' or 'galerkin', got {p.test!r}")
        if not p.seeds:
            raise ConfigError("problem.seeds must not be empty")
        if self.loss.kind not in ("ResidualL2", "Preconditioned"):
            raise ConfigError(f"unknown loss.kind {self.loss.kind!r}")
        if self.loss.norm not in ("Unorm", "L2"):
            raise ConfigError(f"unknown loss.norm {self.loss.norm!r}")
        s = self.schedule
        if len(s.composite) != len(s.alphas):
            raise ConfigError("schedule.composite and schedule.alphas differ in length")
        if any(b < a for a, b in zip(s.alphas, s.alphas[1:])):
            raise ConfigError("schedule.alphas must be non-decreasing")
        if min([s.datafit, s.pde, s.fit, s.coeff] + list(s.composite)) < 0:
            raise ConfigError("iteration budgets must be non-negative")
        if self.observations.mode not in OBS_MODES:
            raise ConfigError(f"observations.mode must be one of {OBS_MODES}")
        if self.observations.sigma < 0:
            raise ConfigError("observations.sigma must be non-negative")
        if not 0 < self.mesh.mark_fraction <= 1:
            raise ConfigError("mesh.mark_fraction must lie in (0, 1]")
        if self.output.history_every < 1:
            raise ConfigError("output.history_every must be >= 1")
        return self


_TABLES = {f.name: f.default_factory for f in fields(ExperimentConfig)}


def _coerce(table, key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{table}] {key} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{table}] {key} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{table}] {key} must be a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{table}] {key} must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"[{table}] {key} must be an array")
    return value


def config_from_dict(data):
    unknown = set(data) - set(_TABLES)
    if unknown:
        raise ConfigError(f"unknown table(s): {sorted(unknown)}")
    parts = {}
    for name, factory in _TABLES.items():
        base = factory()
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        valid = {f.name for f in fields(base)}
        bad = set(table) - valid
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
        vals = {k: _coerce(name, k, v, getattr(base, k)) for k, v in table.items()}
        parts[name] = replace(base, **vals)
    return ExperimentConfig(**parts).validate()


def load_config(path):
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
