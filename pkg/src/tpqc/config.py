"""Run configuration: nested dataclasses loaded from JSON with strict key checking.

Fields left as ``None`` are filled with problem-specific defaults by
:func:`resolve`; the resolved config is what every run echoes to disk.
"""

from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .linalg import InvalidInput

PROBLEMS = ("advection_diffusion", "burgers", "linear_euler")


class ConfigError(InvalidInput):
    """Malformed, unknown or out-of-range configuration entry."""


@dataclass
class ProblemConfig:
    """Physical setup; ``None`` entries take the defaults of the selected problem."""

    name: str = "burgers"
    n: int = 6
    nu: float | None = None
    c_adv: float | None = None
    sigma: float = 0.5
    rho: float = 1.225
    c_sound: float = 340.2
    omega: float = 100.0
    amplitude: float | None = None
    gamma_max: float = 1500.0
    kappa: float = 0.13
    n_tilde: int = 4
    stencil: str = "first"


@dataclass
class CompileConfig:
    Z: int = 16
    method: str = "lm"
    lr: float = 0.1
    tol: float = 5e-10
    max_iters: int = 500
    accept_tol: float = 1e-8
    cache_dir: str | None = None


@dataclass
class AnsatzConfig:
    layers: int | None = None
    entangler: str = "cnot"


@dataclass
class TimeConfig:
    scheme: str | None = None
    dt: float | None = None
    steps: int | None = None


@dataclass
class OptimizerConfig:
    """Per-step training: Adam, then an optional deterministic refinement stage.

    ``refine`` is ``"lbfgs"``, ``"gd"`` (gradient descent with backtracking
    line search) or ``"none"``.  ``gradient`` selects the adjoint sweep or
    the parameter-shift rule; both are exact in exact mode.
    """

    kind: str = "adam"
    lr: float | None = None
    epochs: int | None = None
    refine: str = "lbfgs"
    refine_iters: int = 2000
    gradient: str = "adjoint"
    fidelity_threshold: float = 1.0 - 1e-6
    stop_infidelity: float = 1e-9
    init_restarts: int = 5
    init_epochs: int = 1000
    init_lr: float = 0.05
    init_noise: float = 0.1
    spsa_shift: float = 0.1


@dataclass
class ModeConfig:
    """``exact`` uses exact expectations; ``shots`` samples every measured expectation."""

    kind: str = "exact"
    shots: int = 10000
    metrics: str = "circuit"


@dataclass
class SweepConfig:
    operators: list[str] = field(default_factory=lambda: ["identity", "first_derivative", "backward_derivative",
                                                          "second_derivative", "forward_dirichlet", "sponge"])
    n_min: int = 4
    n_max: int = 10
    sigmas: list[float] = field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    pointwise_n_max: int = 14
    grid_sigmas: list[float] = field(default_factory=lambda: [0.5, 0.1, 1e-2, 1e-3, 1e-4])
    grid_error: float = 1e-3
    grid_n_max: int = 16
    compile_n_max: int = 0


@dataclass
class LandscapeConfig:
    n_values: list[int] = field(default_factory=lambda: [4, 6, 8])
    layers: int = 4
    param_index: int = 0
    points: int = 41
    shots: list[int] = field(default_factory=lambda: [100, 1000, 10000])
    repeats: int = 20
    dt: float = 1e-3
    restarts: int = 2
    init_epochs: int = 300
    compiled: bool = False


@dataclass
class ScalingConfig:
    n_values: list[int] = field(default_factory=lambda: [3, 6, 9])
    field: str = "multiscale"
    target_error: float = 0.01
    eps: float = 0.01
    max_layers: int = 12
    restarts: int = 3


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    compile: CompileConfig = field(default_factory=CompileConfig)
    ansatz: AnsatzConfig = field(default_factory=AnsatzConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    oracle: bool = True
    seed: int = 0
    output: str | None = None
    checkpoint_every: int = 1


# problem defaults: layers, scheme, dt (None = derived), steps, Adam lr, Adam epochs
_DEFAULTS = {
    "advection_diffusion": dict(layers=10, scheme="euler", dt=2.5e-4, steps=100, lr=0.005, epochs=1000, nu=0.1, c_adv=20.0),
    "burgers": dict(layers=10, scheme="euler", dt=None, steps=60, lr=0.005, epochs=1000, nu=0.001, c_adv=0.0),
    "linear_euler": dict(layers=14, scheme="rk4", dt=2.5e-4, steps=45, lr=0.05, epochs=751, nu=0.0, c_adv=0.0),
}

_CHOICES = {
    ("problem", "name"): PROBLEMS,
    ("problem", "stencil"): ("first", "eighth"),
    ("compile", "method"): ("lm", "lbfgs", "gd"),
    ("ansatz", "entangler"): ("cnot", "cz"),
    ("time", "scheme"): ("euler", "rk4"),
    ("optimizer", "kind"): ("adam", "spsa"),
    ("optimizer", "refine"): ("lbfgs", "gd", "none"),
    ("optimizer", "gradient"): ("adjoint", "parameter_shift"),
    ("mode", "kind"): ("exact", "shots"),
    ("mode", "metrics"): ("circuit", "branch"),
    ("scaling", "field"): ("constant", "random", "multiscale"),
}


def _check_value(path: str, hint: Any, value: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(path, inner[0], value)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_check_value(f"{path}[{i}]", args[0], v) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{path}: expected a finite number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    raise ConfigError(f"{path}: unsupported type {hint}")  # pragma: no cover


def _build(cls: type, data: Any, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {k: _check_value(f"{path}.{k}" if path else k, hints[k], v) for k, v in data.items()}
    return cls(**kwargs)


def validate(cfg: RunConfig) -> RunConfig:
    """Range and choice checks; returns ``cfg`` unchanged or raises :class:`ConfigError`."""
    for (section, key), choices in _CHOICES.items():
        value = getattr(getattr(cfg, section), key)
        if value is not None and value not in choices:
            raise ConfigError(f"{section}.{key}: {value!r} not in {list(choices)}")
    p = cfg.problem
    if not 2 <= p.n <= 14:
        raise ConfigError("problem.n must lie in 2..14")
    if p.sigma <= 0 or p.rho <= 0 or p.c_sound <= 0:
        raise ConfigError("problem.sigma, rho and c_sound must be positive")
    if cfg.compile.Z < 2 or cfg.compile.Z & (cfg.compile.Z - 1):
        raise ConfigError("compile.Z must be a power of two >= 2")
    if cfg.ansatz.layers is not None and cfg.ansatz.layers < 1:
        raise ConfigError("ansatz.layers must be >= 1")
    t = cfg.time
    if t.dt is not None and t.dt < 0:
        raise ConfigError("time.dt must be non-negative")
    if t.steps is not None and t.steps < 0:
        raise ConfigError("time.steps must be non-negative")
    o = cfg.optimizer
    if not 0.0 < o.fidelity_threshold <= 1.0:
        raise ConfigError("optimizer.fidelity_threshold must lie in (0, 1]")
    if o.init_restarts < 1 or o.refine_iters < 0:
        raise ConfigError("optimizer.init_restarts must be >= 1 and refine_iters >= 0")
    if cfg.mode.shots < 1:
        raise ConfigError("mode.shots must be >= 1")
    if cfg.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    return cfg


def resolve(cfg: RunConfig) -> RunConfig:
    """Copy of ``cfg`` with every problem-dependent ``None`` replaced by its default."""
    cfg = validate(dataclasses.replace(cfg))
    d = _DEFAULTS[cfg.problem.name]
    p = dataclasses.replace(cfg.problem)
    p.nu = d["nu"] if p.nu is None else p.nu
    p.c_adv = d["c_adv"] if p.c_adv is None else p.c_adv
    if p.amplitude is None:
        p.amplitude = 0.4 * p.c_sound
    a = dataclasses.replace(cfg.ansatz, layers=cfg.ansatz.layers or d["layers"])
    dt = cfg.time.dt
    if dt is None:
        dt = d["dt"] if d["dt"] is not None else 0.5 * 2 * math.pi / 2**p.n
    t = TimeConfig(scheme=cfg.time.scheme or d["scheme"], dt=dt,
                   steps=d["steps"] if cfg.time.steps is None else cfg.time.steps)
    o = dataclasses.replace(cfg.optimizer,
                            lr=d["lr"] if cfg.optimizer.lr is None else cfg.optimizer.lr,
                            epochs=d["epochs"] if cfg.optimizer.epochs is None else cfg.optimizer.epochs)
    return validate(dataclasses.replace(cfg, problem=p, ansatz=a, time=t, optimizer=o))


def from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)
