from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from engine.errors import ConfigError
from engine.settings import EngineDefaults, load_defaults

LOGGER = logging.getLogger(__name__)

EXPERIMENTS = ("solve", "grad", "hess", "verify-barriers", "verify-quasi", "verify-bounds", "hypotheses")
BSDE_METHODS = ("driver-free", "picard")
SOURCES = ("perturbed", "analytic")
SCHEMES = ("boundary", "interior", "zero", "switching")


@dataclass(frozen=True)
class Numerics:
    h: float
    n_paths: int
    t_max: float | None = None
    delta_ladder: tuple[float, ...] = (0.1, 0.05, 0.025)
    lam: float | None = None
    delta1: float | None = None
    k1: float = 1.0
    localization: float | None = None
    beta: float | None = None
    moment_order: int = 1
    grid_resolution: int = 33
    pair_budget: int = 1_000_000
    picard_max_iter: int = 20
    picard_tol: float = 1e-6
    bsde_method: str = "driver-free"
    scheme: str = "switching"
    guard_policy: str = "truncate"
    checkpoints: tuple[float, ...] = (0.05, 0.1, 0.2)
    calibration_fraction: float = 0.5
    epsilon_ladder: tuple[float, ...] = (0.2, 0.1, 0.05)
    epsilon_step: float = 1e-4
    derivative_source: str = "perturbed"
    order: int = 1
    panel_size: int = 30
    barrier_lambda: float | None = None
    chunk_paths: int = 4096
    workers: int = 1
    rng_block: int = 4096
    bisection_steps: int = 40
    fd_tolerance: float = 1e-5
    progress: bool = False


@dataclass(frozen=True)
class Point:
    x: tuple[float, ...]
    xi0: tuple[float, ...] | None = None

    def as_dict(self) -> dict[str, Any]:
        return {"x": list(self.x), "xi0": None if self.xi0 is None else list(self.xi0)}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    experiment: str
    seed: int
    numerics: Numerics
    points: tuple[Point, ...] = ()
    output: str = "reports"
    source: str | None = field(default=None, compare=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))

    def with_output(self, output: str) -> "ExperimentConfig":
        return dataclasses.replace(self, output=str(output))

    def as_dict(self) -> dict[str, Any]:
        numerics = dataclasses.asdict(self.numerics)
        for key, value in numerics.items():
            if isinstance(value, tuple):
                numerics[key] = list(value)
        numerics["lambda"] = numerics.pop("lam")
        return {
            "problem": self.problem,
            "experiment": self.experiment,
            "seed": self.seed,
            "numerics": numerics,
            "points": [p.as_dict() for p in self.points],
            "output": self.output,
        }


_FLOAT_FIELDS = {"h", "t_max", "lam", "delta1", "k1", "localization", "beta", "picard_tol", "calibration_fraction", "epsilon_step", "barrier_lambda", "fd_tolerance"}
_INT_FIELDS = {"n_paths", "moment_order", "grid_resolution", "pair_budget", "picard_max_iter", "order", "panel_size", "chunk_paths", "workers", "rng_block", "bisection_steps"}
_LADDER_FIELDS = {"delta_ladder", "checkpoints", "epsilon_ladder"}
_STRING_FIELDS = {"bsde_method": BSDE_METHODS, "scheme": SCHEMES, "guard_policy": ("raise", "truncate"), "derivative_source": SOURCES}
_KEY_ALIASES = {"lambda": "lam"}
_POSITIVE = {"h", "n_paths", "t_max", "lam", "delta1", "localization", "picard_tol", "epsilon_step", "barrier_lambda", "fd_tolerance", "grid_resolution", "pair_budget", "picard_max_iter", "panel_size", "chunk_paths", "workers", "rng_block", "bisection_steps"}


def _field_error(path: str, message: str) -> ConfigError:
    return ConfigError(f"{path}: {message}", field=path)


def _number(path: str, value: Any, kind: type) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _field_error(path, f"expected a number, got {type(value).__name__}")
    if kind is int:
        if float(value) != int(value):
            raise _field_error(path, "expected an integer")
        return int(value)
    return float(value)


def _ladder(path: str, value: Any) -> tuple[float, ...]:
    if not isinstance(value, list) or not value:
        raise _field_error(path, "expected a non-empty list of numbers")
    items = tuple(_number(f"{path}[{i}]", item, float) for i, item in enumerate(value))
    if any(v <= 0 for v in items):
        raise _field_error(path, "entries must be positive")
    return items


def _vector(path: str, value: Any) -> tuple[float, ...]:
    if not isinstance(value, list) or not value:
        raise _field_error(path, "expected a non-empty list of coordinates")
    return tuple(_number(f"{path}[{i}]", item, float) for i, item in enumerate(value))


def _numerics(raw: Any, defaults: EngineDefaults) -> Numerics:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise _field_error("numerics", "expected an object")
    known = {f.name for f in dataclasses.fields(Numerics)}
    values: dict[str, Any] = {
        "h": defaults.step,
        "n_paths": defaults.paths,
        "grid_resolution": defaults.grid_resolution,
        "pair_budget": defaults.pair_budget,
        "chunk_paths": defaults.chunk_paths,
        "workers": defaults.workers,
        "rng_block": defaults.rng_block,
        "bisection_steps": defaults.bisection_steps,
        "fd_tolerance": defaults.fd_tolerance,
        "progress": defaults.progress,
    }
    for name, value in raw.items():
        path = f"numerics.{name}"
        key = _KEY_ALIASES.get(name, name)
        if key not in known:
            raise _field_error(path, "unknown key")
        if value is None:
            values[key] = None
        elif key in _FLOAT_FIELDS:
            values[key] = _number(path, value, float)
        elif key in _INT_FIELDS:
            values[key] = _number(path, value, int)
        elif key in _LADDER_FIELDS:
            values[key] = _ladder(path, value)
        elif key in _STRING_FIELDS:
            if value not in _STRING_FIELDS[key]:
                raise _field_error(path, f"expected one of {', '.join(_STRING_FIELDS[key])}")
            values[key] = value
        elif key == "progress":
            if not isinstance(value, bool):
                raise _field_error(path, "expected true or false")
            values[key] = value
    for key in _POSITIVE:
        value = values.get(key)
        if value is not None and value <= 0:
            raise _field_error(f"numerics.{key}", "must be positive")
    numerics = Numerics(**values)
    if numerics.k1 < 1.0:
        raise _field_error("numerics.k1", "must be >= 1")
    if numerics.moment_order not in (1, 2):
        raise _field_error("numerics.moment_order", "must be 1 or 2")
    if numerics.order not in (1, 2):
        raise _field_error("numerics.order", "must be 1 or 2")
    if numerics.lam is not None and not 0.0 < numerics.lam < 1.0:
        raise _field_error("numerics.lam", "must lie in (0, 1)")
    if numerics.lam is not None and numerics.delta1 is not None and not numerics.delta1 < numerics.lam**2:
        raise _field_error("numerics.delta1", "must be smaller than lambda^2")
    if not 0.0 < numerics.calibration_fraction < 1.0:
        raise _field_error("numerics.calibration_fraction", "must lie in (0, 1)")
    if len(numerics.delta_ladder) < 3 or any(b >= a for a, b in zip(numerics.delta_ladder, numerics.delta_ladder[1:])):
        raise _field_error("numerics.delta_ladder", "needs at least three strictly decreasing values")
    if any(b >= a for a, b in zip(numerics.epsilon_ladder, numerics.epsilon_ladder[1:])):
        raise _field_error("numerics.epsilon_ladder", "must be strictly decreasing")
    if any(b <= a for a, b in zip(numerics.checkpoints, numerics.checkpoints[1:])):
        raise _field_error("numerics.checkpoints", "must be strictly increasing")
    return numerics


def _points(raw: Any) -> tuple[Point, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise _field_error("points", "expected a list")
    points = []
    for i, item in enumerate(raw):
        path = f"points[{i}]"
        if not isinstance(item, dict) or "x" not in item:
            raise _field_error(path, "expected an object with an 'x' list")
        x = _vector(f"{path}.x", item["x"])
        xi0 = _vector(f"{path}.xi0", item["xi0"]) if item.get("xi0") is not None else None
        if xi0 is not None and len(xi0) != len(x):
            raise _field_error(f"{path}.xi0", "dimension differs from x")
        points.append(Point(x=x, xi0=xi0))
    return tuple(points)


def parse_config(payload: dict[str, Any], *, source: str | None = None, defaults: EngineDefaults | None = None) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    defaults = defaults or load_defaults()
    allowed = {"problem", "experiment", "seed", "numerics", "points", "output"}
    for key in payload:
        if key not in allowed:
            raise _field_error(key, "unknown key")
    problem = payload.get("problem")
    if not isinstance(problem, str) or not problem.strip():
        raise _field_error("problem", "expected a built-in name or a path")
    experiment = payload.get("experiment")
    if experiment not in EXPERIMENTS:
        raise _field_error("experiment", f"expected one of {', '.join(EXPERIMENTS)}")
    if "seed" not in payload:
        raise _field_error("seed", "is mandatory")
    seed = _number("seed", payload["seed"], int)
    if seed < 0:
        raise _field_error("seed", "must be non-negative")
    output = payload.get("output", defaults.output_root)
    if not isinstance(output, str) or not output:
        raise _field_error("output", "expected a directory path")
    problem = problem.strip()
    if source and problem.endswith(".py") and not Path(problem).is_absolute():
        problem = str((Path(source).parent / problem).resolve())
    return ExperimentConfig(
        problem=problem,
        experiment=experiment,
        seed=seed,
        numerics=_numerics(payload.get("numerics"), defaults),
        points=_points(payload.get("points")),
        output=output,
        source=source,
    )


def load_config(path: str | Path, *, defaults: EngineDefaults | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    config = parse_config(payload, source=str(path), defaults=defaults)
    LOGGER.debug("loaded %s config for %s from %s", config.experiment, config.problem, path)
    return config
