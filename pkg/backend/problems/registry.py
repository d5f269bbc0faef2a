from __future__ import annotations

import importlib.util
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from engine.errors import ConfigError
from engine.problem import ProblemBundle, check_derivatives
from problems import euler_interval, harmonic_disk, manufactured_disk

LOGGER = logging.getLogger(__name__)

GATE_RESOLUTION = 9

BUILTINS: dict[str, Callable[..., ProblemBundle]] = {
    harmonic_disk.NAME: harmonic_disk.build,
    euler_interval.NAME: euler_interval.build,
    manufactured_disk.NAME: manufactured_disk.build,
    manufactured_disk.MONOTONE_NAME: manufactured_disk.build_monotone,
}

ALIASES = {"tp1": harmonic_disk.NAME, "tp2": euler_interval.NAME, "tp3": manufactured_disk.NAME}


def _load_user_module(path: Path) -> Callable[..., ProblemBundle]:
    if not path.is_file():
        raise ConfigError(f"problem is neither a built-in name nor a file: {path}", field="problem")
    module_spec = importlib.util.spec_from_file_location(f"user_problem_{path.stem}", path)
    if module_spec is None or module_spec.loader is None:
        raise ConfigError(f"cannot import problem module {path}", field="problem")
    module = importlib.util.module_from_spec(module_spec)
    module_spec.loader.exec_module(module)
    builder = getattr(module, "build_problem", None)
    if not callable(builder):
        raise ConfigError(f"{path} does not define build_problem()", field="problem")
    return builder


def resolve_builder(problem: str) -> Callable[..., ProblemBundle]:
    key = ALIASES.get(problem.lower(), problem)
    if key in BUILTINS:
        return BUILTINS[key]
    return _load_user_module(Path(problem))


def load_problem(
    problem: str,
    *,
    lam: float | None = None,
    delta1: float | None = None,
    fd_tolerance: float = 1e-5,
    gate: bool = True,
) -> ProblemBundle:
    """Build a problem by name or file and cross-check its derivative callbacks."""
    bundle = resolve_builder(problem)()
    if not isinstance(bundle, ProblemBundle):
        raise ConfigError("build_problem() must return a ProblemBundle", field="problem")
    if lam is not None or delta1 is not None:
        bundle = bundle.with_region(bundle.dom.lam if lam is None else lam, delta1)
    if gate:
        points = bundle.dom.grid(GATE_RESOLUTION)
        if points.shape[0] == 0:
            points = np.asarray(bundle.dom.center, dtype=float)[None, :]
        deviations = check_derivatives(bundle.spec, bundle.dom, points, rtol=fd_tolerance)
        LOGGER.info("loaded problem %s (max derivative deviation %.2e)", bundle.spec.name, max(deviations.values()))
    return bundle
