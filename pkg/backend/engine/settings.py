from __future__ import annotations

import os
from dataclasses import dataclass


def _clamp(value: float, minimum: float, maximum: float) -> float:
    return max(minimum, min(value, maximum))


def _resolve_bool_env(name: str, default: bool) -> bool:
    raw_value = os.environ.get(name)
    if raw_value is None:
        return default
    normalized = raw_value.strip().lower()
    if normalized in {"1", "true", "yes", "on"}:
        return True
    if normalized in {"0", "false", "no", "off"}:
        return False
    return default


def _resolve_float_env(name: str, default: float, minimum: float, maximum: float) -> float:
    raw_value = os.environ.get(name)
    if raw_value is None:
        return default
    try:
        parsed = float(raw_value)
    except (TypeError, ValueError):
        return default
    return _clamp(parsed, minimum, maximum)


def _resolve_int_env(name: str, default: int, minimum: int, maximum: int) -> int:
    raw_value = os.environ.get(name)
    if raw_value is None:
        return default
    try:
        parsed = int(raw_value)
    except (TypeError, ValueError):
        return default
    return int(_clamp(parsed, minimum, maximum))


@dataclass(frozen=True)
class EngineDefaults:
    step: float
    paths: int
    chunk_paths: int
    rng_block: int
    workers: int
    grid_resolution: int
    pair_budget: int
    fd_tolerance: float
    bisection_steps: int
    progress: bool
    output_root: str = "reports"


def resolve_log_level() -> str:
    level = os.environ.get("QF_LOG_LEVEL", "INFO").strip().upper()
    return level if level in {"DEBUG", "INFO", "WARNING", "ERROR"} else "INFO"


def load_defaults() -> EngineDefaults:
    """Process-wide numeric defaults; experiment configs override per run."""
    return EngineDefaults(
        step=_resolve_float_env("QF_STEP", 1e-3, 1e-8, 0.5),
        paths=_resolve_int_env("QF_PATHS", 10_000, 1, 50_000_000),
        chunk_paths=_resolve_int_env("QF_CHUNK_PATHS", 4096, 64, 1_048_576),
        rng_block=_resolve_int_env("QF_RNG_BLOCK", 4096, 1, 1_048_576),
        workers=_resolve_int_env("QF_WORKERS", 1, 1, 256),
        grid_resolution=_resolve_int_env("QF_GRID_RESOLUTION", 33, 8, 4097),
        pair_budget=_resolve_int_env("QF_PAIR_BUDGET", 1_000_000, 1_000, 100_000_000),
        fd_tolerance=_resolve_float_env("QF_FD_TOLERANCE", 1e-5, 1e-12, 1e-1),
        bisection_steps=_resolve_int_env("QF_BISECTION_STEPS", 40, 1, 200),
        progress=_resolve_bool_env("QF_PROGRESS", False),
        output_root=os.environ.get("QF_OUTPUT_ROOT", "").strip() or "reports",
    )


def inline_fallback_enabled() -> bool:
    return _resolve_bool_env("QF_INLINE_FALLBACK", True)
