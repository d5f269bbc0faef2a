"""Euler-Maruyama simulation of the forward diffusion stopped at the first exit from D."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence, TypeVar

import numpy as np
from tqdm import tqdm

from engine.errors import InvalidArgumentError, NonFiniteStateError
from engine.problem import DomainSpec, ProblemSpec
from engine.rng import CoarsenedStream, IncrementStream
from engine.stats import BASE_Z, summarize

LOGGER = logging.getLogger(__name__)

CAPPED = -1
CAPPED_WARNING_FRACTION = 0.01
T = TypeVar("T")


class StepModulation(Protocol):
    """Hook replacing (sigma, b) of alive rows before an Euler step."""

    def apply(
        self, step: int, rows: np.ndarray, sig: np.ndarray, drift: np.ndarray, dw: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class PathEnsemble:
    """Paths stored densely; after stopping a path is frozen at its projected exit point."""

    x0: np.ndarray
    h: float
    t_max: float
    n_steps: int
    states: np.ndarray
    exit_index: np.ndarray
    exit_time: np.ndarray
    refined_time: np.ndarray
    capped: np.ndarray
    overshoot: np.ndarray
    seed: int
    path_offset: int = 0
    rng_block: int = 4096
    d1: int = 1
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.states.shape[1])

    @property
    def d(self) -> int:
        return int(self.states.shape[2])

    @property
    def stored_steps(self) -> int:
        return int(self.states.shape[0] - 1)

    @property
    def stop_index(self) -> np.ndarray:
        return np.where(self.capped, self.n_steps, self.exit_index)

    def state_at(self, step: int) -> np.ndarray:
        return self.states[min(step, self.stored_steps)]

    def alive_at(self, step: int) -> np.ndarray:
        """Paths that have not stopped at or before grid index ``step``."""
        return self.stop_index > step

    def stopped_states(self) -> np.ndarray:
        stop = np.minimum(self.stop_index, self.stored_steps)
        return self.states[stop, np.arange(self.n_paths)]

    def stream(self) -> IncrementStream:
        return IncrementStream(
            self.seed,
            self.n_paths,
            self.d1,
            self.h,
            path_offset=self.path_offset,
            block=self.rng_block,
        )


def bisect_crossing(
    level_fn: Callable[[np.ndarray], np.ndarray],
    inside: np.ndarray,
    outside: np.ndarray,
    steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Bisect segments from ``inside`` (level_fn > 0) to ``outside`` (level_fn <= 0).

    Returns the outside endpoint of the final bracket and its segment fraction.
    """
    lo = np.zeros(inside.shape[0])
    hi = np.ones(inside.shape[0])
    seg = outside - inside
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        ok = level_fn(inside + mid[:, None] * seg) > 0.0
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return inside + hi[:, None] * seg, hi


def default_horizon(dom: DomainSpec) -> float:
    return 50.0 * dom.psi_sup


def integrate_paths(
    spec: ProblemSpec,
    dom: DomainSpec | None,
    start: np.ndarray,
    stream: IncrementStream | CoarsenedStream,
    n_steps: int,
    *,
    modulation: StepModulation | None = None,
    bisection_steps: int = 40,
    progress: bool = False,
    label: str = "paths",
) -> dict[str, np.ndarray]:
    """Shared stepping loop for base and perturbed runs; ``dom=None`` never stops."""
    n = start.shape[0]
    h = stream.h
    x = np.array(start, dtype=float, copy=True)
    history = [x.copy()]
    alive = np.ones(n, dtype=bool)
    exit_index = np.full(n, CAPPED, dtype=np.int64)
    refined = np.full(n, n_steps * h)
    overshoot = np.full_like(x, np.nan)

    for step in tqdm(range(n_steps), desc=label, disable=not progress, leave=False):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        dw = stream.increments(step)
        cur = x[rows]
        sig = spec.sigma(cur)
        drift = spec.b(cur)
        if modulation is not None:
            sig, drift = modulation.apply(step, rows, sig, drift, dw)
        nxt = cur + np.einsum("nij,nj->ni", sig, dw[rows]) + drift * h
        bad = ~np.isfinite(nxt).all(axis=1)
        if np.any(bad):
            row = int(rows[np.flatnonzero(bad)[0]])
            raise NonFiniteStateError(
                f"non-finite state on path {stream.path_offset + row} at step {step + 1}",
                path_id=stream.path_offset + row,
                step=step + 1,
            )
        if dom is not None:
            crossed = dom.psi(nxt) <= 0.0
            if np.any(crossed):
                hit = rows[crossed]
                projected, frac = bisect_crossing(dom.psi, cur[crossed], nxt[crossed], bisection_steps)
                overshoot[hit] = nxt[crossed]
                exit_index[hit] = step + 1
                refined[hit] = (step + frac) * h
                alive[hit] = False
                nxt[crossed] = projected
        x[rows] = nxt
        history.append(x.copy())

    capped = exit_index == CAPPED
    exit_time = np.where(capped, n_steps * h, exit_index * h)
    return {
        "states": np.stack(history, axis=0),
        "exit_index": exit_index,
        "exit_time": exit_time,
        "refined_time": np.where(capped, n_steps * h, refined),
        "capped": capped,
        "overshoot": overshoot,
    }


def simulate_ensemble(
    spec: ProblemSpec,
    dom: DomainSpec,
    x0: Sequence[float] | np.ndarray,
    h: float,
    n_paths: int,
    t_max: float | None = None,
    seed: int = 0,
    *,
    path_offset: int = 0,
    rng_block: int = 4096,
    bisection_steps: int = 40,
    progress: bool = False,
) -> PathEnsemble:
    x0 = np.asarray(x0, dtype=float).reshape(spec.d)
    if h <= 0:
        raise InvalidArgumentError("time step must be positive", h=h)
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be >= 1", n_paths=n_paths)
    if float(dom.psi(x0[None, :])[0]) <= 0.0:
        raise InvalidArgumentError("start point outside D", x0=x0.tolist())
    if t_max is None:
        t_max = default_horizon(dom)
    n_steps = max(1, int(math.ceil(t_max / h - 1e-9)))
    stream = IncrementStream(seed, n_paths, spec.d1, h, path_offset=path_offset, block=rng_block)
    start = np.broadcast_to(x0, (n_paths, spec.d))
    out = integrate_paths(spec, dom, start, stream, n_steps, bisection_steps=bisection_steps, progress=progress)
    return PathEnsemble(
        x0=x0,
        h=float(h),
        t_max=float(n_steps * h),
        n_steps=n_steps,
        seed=int(seed),
        path_offset=path_offset,
        rng_block=rng_block,
        d1=spec.d1,
        **out,
    )


def chunk_bounds(n_paths: int, chunk_paths: int) -> list[tuple[int, int]]:
    return [(start, min(chunk_paths, n_paths - start)) for start in range(0, n_paths, chunk_paths)]


def map_chunks(
    fn: Callable[[PathEnsemble], T],
    spec: ProblemSpec,
    dom: DomainSpec,
    x0: Sequence[float] | np.ndarray,
    h: float,
    n_paths: int,
    seed: int,
    *,
    t_max: float | None = None,
    chunk_paths: int = 4096,
    workers: int = 1,
    rng_block: int = 4096,
    bisection_steps: int = 40,
) -> list[T]:
    """Simulate path chunks and reduce each with ``fn``; results come back in chunk order.

    Increments are keyed by global path id, so the pooled result does not depend
    on ``chunk_paths`` or ``workers``.
    """

    def job(bounds: tuple[int, int]) -> T:
        offset, count = bounds
        ens = simulate_ensemble(
            spec,
            dom,
            x0,
            h,
            count,
            t_max,
            seed,
            path_offset=offset,
            rng_block=rng_block,
            bisection_steps=bisection_steps,
        )
        return fn(ens)

    bounds = chunk_bounds(n_paths, chunk_paths)
    if workers <= 1 or len(bounds) == 1:
        return [job(b) for b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, bounds))


@dataclass(frozen=True)
class ExitStatistics:
    mean: float
    variance: float
    se: float
    ci95: tuple[float, float]
    second_moment: float
    second_moment_se: float
    capped_fraction: float
    n_exited: int
    psi_x0: float
    psi_sup: float
    verdict: str
    warnings: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "se": self.se,
            "ci95": list(self.ci95),
            "second_moment": self.second_moment,
            "second_moment_se": self.second_moment_se,
            "capped_fraction": self.capped_fraction,
            "n_exited": self.n_exited,
            "psi_x0": self.psi_x0,
            "bound_first": self.psi_x0,
            "bound_second": 2.0 * self.psi_sup * self.psi_x0,
            "verdict": self.verdict,
            "warnings": list(self.warnings),
        }


def exit_statistics(ens: PathEnsemble | Sequence[PathEnsemble], dom: DomainSpec) -> ExitStatistics:
    """Exit-time moments over exited paths checked against E tau <= psi(x0) and E tau^2 <= 2|psi|_0 psi(x0)."""
    pieces = [ens] if isinstance(ens, PathEnsemble) else list(ens)
    if not pieces or sum(p.n_paths for p in pieces) == 0:
        raise InvalidArgumentError("ensemble is empty")
    times = np.concatenate([p.refined_time[~p.capped] for p in pieces])
    total = sum(p.n_paths for p in pieces)
    capped_fraction = 1.0 - times.size / total
    psi_x0 = float(dom.psi(pieces[0].x0[None, :])[0])
    notes: list[str] = []
    if capped_fraction > CAPPED_WARNING_FRACTION:
        note = f"{capped_fraction:.2%} of paths hit the horizon cap; exit statistics are biased low"
        LOGGER.warning(note)
        notes.append(note)
    if times.size == 0:
        nan = float("nan")
        return ExitStatistics(nan, nan, nan, (nan, nan), nan, nan, capped_fraction, 0, psi_x0, dom.psi_sup, "inconclusive", tuple(notes))
    first = summarize(times)
    second = summarize(times**2)
    mean, se = float(first.mean[0]), float(first.se[0])
    m2, se2 = float(second.mean[0]), float(second.se[0])
    ok = mean - BASE_Z * se <= psi_x0 and m2 - BASE_Z * se2 <= 2.0 * dom.psi_sup * psi_x0
    return ExitStatistics(
        mean=mean,
        variance=float(times.var(ddof=1)) if times.size > 1 else 0.0,
        se=se,
        ci95=(float(first.ci_low[0]), float(first.ci_high[0])),
        second_moment=m2,
        second_moment_se=se2,
        capped_fraction=capped_fraction,
        n_exited=int(times.size),
        psi_x0=psi_x0,
        psi_sup=dom.psi_sup,
        verdict="pass" if ok else "fail",
        warnings=tuple(notes),
    )


@dataclass(frozen=True)
class StrongOrderReport:
    steps: list[float]
    errors: list[float]
    orders: list[float]
    passed: bool

    def as_dict(self) -> dict[str, Any]:
        return {"steps": self.steps, "errors": self.errors, "orders": self.orders, "passed": self.passed}


def strong_order_check(
    spec: ProblemSpec,
    x0: Sequence[float] | np.ndarray,
    exact_flow: Callable[[np.ndarray, float, np.ndarray], np.ndarray],
    *,
    t_fixed: float,
    h: float,
    n_paths: int,
    seed: int,
    levels: int = 3,
    min_order: float = 0.4,
) -> StrongOrderReport:
    """Mean pathwise error at ``t_fixed`` on grids h, 4h, 16h, ... sharing one Brownian path.

    ``exact_flow(x0, t, W_t)`` is the closed-form solution driven by W_t.
    Orders are measured in h between successive grids.
    """
    x0 = np.asarray(x0, dtype=float).reshape(spec.d)
    fine_steps = int(round(t_fixed / h))
    if fine_steps % (4 ** (levels - 1)):
        raise InvalidArgumentError("t_fixed / h must be divisible by 4^(levels-1)", t_fixed=t_fixed, h=h)
    fine = IncrementStream(seed, n_paths, spec.d1, h)
    w_t = sum(fine.increments(i) for i in range(fine_steps))
    exact = exact_flow(np.broadcast_to(x0, (n_paths, spec.d)), t_fixed, w_t)
    start = np.broadcast_to(x0, (n_paths, spec.d))
    steps, errors = [], []
    for level in range(levels):
        factor = 4**level
        stream = fine if factor == 1 else fine.coarsen(factor)
        out = integrate_paths(spec, None, start, stream, fine_steps // factor)
        errors.append(float(np.mean(np.linalg.norm(out["states"][-1] - exact, axis=1))))
        steps.append(h * factor)
    orders = [math.log(errors[j + 1] / errors[j]) / math.log(4.0) for j in range(levels - 1)]
    return StrongOrderReport(steps=steps, errors=errors, orders=orders, passed=all(o >= min_order for o in orders))


_ARRAY_FIELDS = ("x0", "states", "exit_index", "exit_time", "refined_time", "capped", "overshoot")


def save_ensemble(ens: PathEnsemble, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = np.array([ens.h, ens.t_max], dtype=np.float64)
    counts = np.array([ens.n_steps, ens.seed, ens.path_offset, ens.rng_block, ens.d1], dtype=np.uint64)
    with path.open("wb") as handle:
        np.savez_compressed(handle, header_steps=steps, header_counts=counts, **{name: getattr(ens, name) for name in _ARRAY_FIELDS})
    return path


def load_ensemble(path: str | Path) -> PathEnsemble:
    with np.load(Path(path)) as archive:
        h, t_max = archive["header_steps"].tolist()
        n_steps, seed, offset, block, d1 = archive["header_counts"].tolist()
        arrays = {name: archive[name] for name in _ARRAY_FIELDS}
    return PathEnsemble(
        h=h,
        t_max=t_max,
        n_steps=int(n_steps),
        seed=int(seed),
        path_offset=int(offset),
        rng_block=int(block),
        d1=int(d1),
        **arrays,
    )
