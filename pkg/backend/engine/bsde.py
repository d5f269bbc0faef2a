"""Random-horizon BSDE solvers: exact Monte Carlo for x-only drivers and Picard regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from engine.errors import InvalidArgumentError, PreconditionError
from engine.linalg import least_squares, polynomial_features
from engine.problem import DomainSpec, ProblemSpec, check_h7
from engine.sde import PathEnsemble
from engine.stats import summarize

LOGGER = logging.getLogger(__name__)

Basis = Callable[[np.ndarray], np.ndarray]
DriverTerms = Callable[[int, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]

DRIVER_FREE = "driver-free"
PICARD = "picard"
PRECONDITION_POINTS = 10
ZERO_TOLERANCE = 1e-12


@dataclass
class BsdeSolution:
    method: str
    x0: np.ndarray
    Y0: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    samples: np.ndarray
    h: float
    n_paths: int
    seed: int
    Y: np.ndarray | None = None
    Z: np.ndarray | None = None
    targets: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    residual_history: list[float] = field(default_factory=list)
    converged: bool = True
    capped_fraction: float = 0.0
    capped_bias: float = 0.0
    diagnostics: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        return {
            "x0": self.x0.tolist(),
            "Y0": self.Y0.tolist(),
            "se": self.se.tolist(),
            "CI": [self.ci_low.tolist(), self.ci_high.tolist()],
            "method": self.method,
            "h": self.h,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "capped_fraction": self.capped_fraction,
            "capped_bias_bound": self.capped_bias,
            "diagnostics": list(self.diagnostics),
        }


def _solution_from_samples(
    method: str,
    samples: np.ndarray,
    ens: PathEnsemble,
    *,
    capped_fraction: float,
    capped_bias: float,
    **extra: Any,
) -> BsdeSolution:
    summary = summarize(samples)
    return BsdeSolution(
        method=method,
        x0=np.asarray(ens.x0, dtype=float),
        Y0=summary.mean,
        se=summary.se,
        ci_low=summary.ci_low,
        ci_high=summary.ci_high,
        samples=samples,
        h=ens.h,
        n_paths=samples.shape[0],
        seed=ens.seed,
        capped_fraction=capped_fraction,
        capped_bias=capped_bias,
        **extra,
    )


def _capped_bias(ens: PathEnsemble, terminal: np.ndarray) -> tuple[float, float]:
    fraction = float(np.mean(ens.capped))
    g_sup = float(np.max(np.linalg.norm(terminal, axis=1))) if terminal.size else 0.0
    return fraction, g_sup * fraction


def check_x_only_driver(spec: ProblemSpec, ens: PathEnsemble, seed: int = 0) -> None:
    """Refuse drivers that depend on (y, z); sampled at a handful of visited states."""
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0xDF], dtype=np.uint64)))
    flat = ens.states.reshape(-1, ens.d)
    x = flat[gen.integers(0, flat.shape[0], size=PRECONDITION_POINTS)]
    y = gen.uniform(-spec.yz_box, spec.yz_box, size=(PRECONDITION_POINTS, spec.k))
    z = gen.uniform(-spec.yz_box, spec.yz_box, size=(PRECONDITION_POINTS, spec.k, spec.d1))
    dep = max(float(np.max(np.abs(spec.f_y(x, y, z)))), float(np.max(np.abs(spec.f_z(x, y, z)))))
    if dep > ZERO_TOLERANCE:
        raise PreconditionError(
            "driver depends on (y, z); the driver-free estimator does not apply, use solve_picard",
            max_partial=dep,
        )


def driver_free_samples(
    ens: PathEnsemble,
    spec: ProblemSpec,
    *,
    time_factor: np.ndarray | None = None,
    log_weight: np.ndarray | None = None,
) -> np.ndarray:
    """Per-path g(X_tau) + sum_i F_i f(X_i) h, optionally times the density exp(log_weight)."""
    stop = ens.stop_index
    values = spec.g(ens.stopped_states()).astype(float)
    zeros_y = np.zeros((1, spec.k))
    zeros_z = np.zeros((1, spec.k, spec.d1))
    for step in range(min(ens.stored_steps, int(stop.max(initial=0)))):
        rows = np.flatnonzero(stop > step)
        if rows.size == 0:
            break
        xs = ens.states[step, rows]
        fx = spec.f(xs, np.broadcast_to(zeros_y, (rows.size, spec.k)), np.broadcast_to(zeros_z, (rows.size, spec.k, spec.d1)))
        if time_factor is None or step >= time_factor.shape[0]:
            weight = ens.h
        else:
            weight = ens.h * time_factor[step, rows][:, None]
        values[rows] += fx * weight
    if log_weight is not None:
        values *= np.exp(log_weight)[:, None]
    return values


def estimate_u_driver_free(
    ens: PathEnsemble,
    spec: ProblemSpec,
    *,
    time_factor: np.ndarray | None = None,
    log_weight: np.ndarray | None = None,
    check: bool = True,
) -> BsdeSolution:
    if check:
        check_x_only_driver(spec, ens)
    samples = driver_free_samples(ens, spec, time_factor=time_factor, log_weight=log_weight)
    fraction, bias = _capped_bias(ens, spec.g(ens.stopped_states()))
    return _solution_from_samples(DRIVER_FREE, samples, ens, capped_fraction=fraction, capped_bias=bias)


def pool_solutions(parts: Sequence[BsdeSolution]) -> BsdeSolution:
    """Combine chunk solutions by concatenating their per-path samples."""
    if not parts:
        raise InvalidArgumentError("nothing to pool")
    samples = np.concatenate([p.samples for p in parts], axis=0)
    summary = summarize(samples)
    weights = np.array([p.n_paths for p in parts], dtype=float)
    fraction = float(np.dot(weights, [p.capped_fraction for p in parts]) / weights.sum())
    bias = max(p.capped_bias / p.capped_fraction if p.capped_fraction else 0.0 for p in parts) * fraction
    first = parts[0]
    return BsdeSolution(
        method=first.method,
        x0=first.x0,
        Y0=summary.mean,
        se=summary.se,
        ci_low=summary.ci_low,
        ci_high=summary.ci_high,
        samples=samples,
        h=first.h,
        n_paths=samples.shape[0],
        seed=first.seed,
        iterations=max(p.iterations for p in parts),
        residual=max(p.residual for p in parts),
        converged=all(p.converged for p in parts),
        capped_fraction=fraction,
        capped_bias=bias,
        diagnostics=[note for p in parts for note in p.diagnostics],
    )


def default_basis(spec: ProblemSpec, dom: DomainSpec, degree: int = 3) -> Basis:
    """Polynomials of total degree <= ``degree`` plus psi and the components of g."""

    def basis(x: np.ndarray) -> np.ndarray:
        return np.column_stack([polynomial_features(x, degree), dom.psi(x), spec.g(x)])

    return basis


def _reference_rank(basis: Basis, ens: PathEnsemble, limit: int = 4096) -> int:
    flat = ens.states[1:].reshape(-1, ens.d) if ens.stored_steps else ens.states.reshape(-1, ens.d)
    stride = max(1, flat.shape[0] // limit)
    return int(np.linalg.matrix_rank(basis(flat[::stride])))


def _regress(basis_values: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, int]:
    coef, rank = least_squares(basis_values, targets.reshape(targets.shape[0], -1))
    return (basis_values @ coef).reshape(targets.shape), rank


def solve_picard(
    ens: PathEnsemble,
    spec: ProblemSpec,
    basis: Basis,
    *,
    max_iter: int = 20,
    tol: float = 1e-6,
    driver_terms: DriverTerms | None = None,
) -> BsdeSolution:
    """Picard iteration with an explicit driver and least-squares conditional expectations.

    Only paths alive at a slice enter its regressions; stopped paths keep
    Y = g(X_tau). Slice 0 has every path at x0, so its conditional
    expectation is the plain mean.

    With ``driver_terms`` (perturbed ensembles) the driver becomes
    F f(X, Y, Z) + Zt theta where Zt is regressed against the increments and
    Z = Zt R^T / sqrt(F).
    """
    if max_iter < 1:
        raise InvalidArgumentError("max_iter must be >= 1", max_iter=max_iter)
    diagnostics: list[str] = []
    h7 = check_h7(spec.constants.mu, spec.constants.L, spec.constants.L0, spec.constants.beta, spec.constants.vartheta)
    if not h7.passed:
        note = "structural constants fail (H7); Picard iteration may not contract: " + ", ".join(
            name for name, ok in h7.clauses.items() if not ok
        )
        LOGGER.warning(note)
        diagnostics.append(note)

    n, k, d1 = ens.n_paths, spec.k, spec.d1
    steps = ens.stored_steps
    stop = ens.stop_index
    terminal = spec.g(ens.stopped_states()).astype(float)
    stream = ens.stream()
    dws = np.stack([stream.increments(i) for i in range(steps)], axis=0) if steps else np.zeros((0, n, d1))
    reference = _reference_rank(basis, ens)
    m = basis(ens.states[0, :1]).shape[1]
    if m < 1:
        raise InvalidArgumentError("regression basis must have at least one column")

    Y = np.broadcast_to(terminal, (steps + 1, n, k)).copy()
    Z = np.zeros((steps, n, k, d1))
    targets = np.zeros((steps, n, k))
    y0_prev = Y[0].mean(axis=0)
    history: list[float] = []
    converged = False
    deficient: set[int] = set()

    for iteration in range(1, max_iter + 1):
        Y_new = np.broadcast_to(terminal, (steps + 1, n, k)).copy()
        Z_new = np.zeros_like(Z)
        for i in range(steps - 1, -1, -1):
            rows = np.flatnonzero(stop > i)
            if rows.size == 0:
                continue
            xs = ens.states[i, rows]
            nxt = Y_new[i + 1, rows]
            if driver_terms is None:
                target = nxt + spec.f(xs, Y[i, rows], Z[i, rows]) * ens.h
            else:
                factor, theta, rot = driver_terms(i, rows)
                z_pde = np.einsum("nkj,nlj->nkl", Z[i, rows], rot) / np.sqrt(np.maximum(factor, 1e-12))[:, None, None]
                driver = factor[:, None] * spec.f(xs, Y[i, rows], z_pde) + np.einsum("nkj,nj->nk", Z[i, rows], theta)
                target = nxt + driver * ens.h
            z_target = nxt[:, :, None] * dws[i, rows][:, None, :] / ens.h
            targets[i, rows] = target
            if i == 0:
                Y_new[0, rows] = target.mean(axis=0)
                Z_new[0, rows] = z_target.mean(axis=0)
                continue
            basis_values = basis(xs)
            Y_new[i, rows], rank = _regress(basis_values, target)
            Z_new[i, rows], _ = _regress(basis_values, z_target)
            if rank < reference:
                deficient.add(i)
        y0 = Y_new[0, 0].copy()
        residual = float(np.max(np.abs(y0 - y0_prev)))
        history.append(residual)
        Y, Z, y0_prev = Y_new, Z_new, y0
        LOGGER.debug("picard iteration %d residual %.3e", iteration, residual)
        if residual < tol:
            converged = True
            break

    if deficient:
        note = f"regression rank below {reference} at {len(deficient)} time slices (first: slice {min(deficient)})"
        LOGGER.warning(note)
        diagnostics.append(note)
    if not converged:
        LOGGER.warning("Picard iteration stopped after %d sweeps with residual %.3e", len(history), history[-1])

    fraction, bias = _capped_bias(ens, terminal)
    samples = targets[0] if steps else terminal
    solution = _solution_from_samples(
        PICARD,
        samples,
        ens,
        capped_fraction=fraction,
        capped_bias=bias,
        Y=Y,
        Z=Z,
        targets=targets,
        iterations=len(history),
        residual=history[-1],
        residual_history=history,
        converged=converged,
        diagnostics=diagnostics,
    )
    solution.Y0 = Y[0, 0].copy()
    return solution


@dataclass(frozen=True)
class MBetaNorm:
    y: float
    z: float

    def as_dict(self) -> dict[str, float]:
        return {"Y": self.y, "Z": self.z}


def _mbeta(process: np.ndarray, ens: PathEnsemble, beta: float) -> float:
    stop = ens.stop_index
    total = np.zeros(process.shape[1])
    for i in range(process.shape[0]):
        rows = stop > i
        if not np.any(rows):
            break
        sq = np.sum(process[i].reshape(process.shape[1], -1) ** 2, axis=1)
        total += np.where(rows, np.exp(2.0 * beta * i * ens.h) * sq * ens.h, 0.0)
    return float(np.sqrt(total.mean()))


def mbeta_norm(solution: BsdeSolution, ens: PathEnsemble, beta: float) -> MBetaNorm:
    """Discrete E[sum_{t_i < tau} e^{2 beta t_i} |.|^2 h]^{1/2} for Y and Z; NaN when not populated."""
    y = _mbeta(solution.Y, ens, beta) if solution.Y is not None else float("nan")
    z = _mbeta(solution.Z, ens, beta) if solution.Z is not None else float("nan")
    return MBetaNorm(y=y, z=z)


def apriori_ratio(solution: BsdeSolution, ens: PathEnsemble, g0: float, f0: float) -> dict[str, float]:
    """E sup|Y|^2 + E sum |Y|^2 h + E sum ||Z||^2 h relative to |g|_0^2 + |f(.,0,0)|_0^2."""
    if solution.Y is None or solution.Z is None:
        raise PreconditionError("a-priori ratio needs the Y and Z processes of a Picard solution")
    stop = ens.stop_index
    steps = solution.Z.shape[0]
    alive = np.arange(steps + 1)[:, None] <= np.minimum(stop, steps)[None, :]
    y_sq = np.sum(solution.Y.reshape(steps + 1, ens.n_paths, -1) ** 2, axis=2)
    sup_term = float(np.mean(np.max(np.where(alive, y_sq, 0.0), axis=0)))
    y_int = _mbeta(solution.Y, ens, 0.0) ** 2
    z_int = _mbeta(solution.Z, ens, 0.0) ** 2
    quantity = sup_term + y_int + z_int
    scale = g0**2 + f0**2
    return {"quantity": quantity, "scale": scale, "ratio": quantity / scale if scale > 0 else float("inf")}


def markov_consistency(
    solution: BsdeSolution,
    ens: PathEnsemble,
    basis: Basis,
    slices: tuple[int, int],
    *,
    agreement: float = 0.9,
) -> dict[str, Any]:
    """Fit Y_i = u_i(X_i) at two slices and compare u_i on the overlap of visited states."""
    if solution.targets is None:
        raise PreconditionError("Markov consistency needs the regression targets of a Picard solution")
    fits = []
    for i in slices:
        if not 0 < i < solution.targets.shape[0]:
            raise InvalidArgumentError("slices must be interior time indices", slice=i)
        rows = ens.alive_at(i)
        xs = ens.states[i, rows]
        design = basis(xs)
        target = solution.targets[i, rows, 0]
        coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
        dof = max(1, xs.shape[0] - int(rank))
        sigma2 = float(np.sum((target - design @ coef) ** 2) / dof)
        fits.append((xs, coef, np.linalg.pinv(design.T @ design), sigma2))

    (xa, ca, ia, sa), (xb, cb, ib, sb) = fits
    lo = np.maximum(xa.min(axis=0), xb.min(axis=0))
    hi = np.minimum(xa.max(axis=0), xb.max(axis=0))
    overlap = xb[np.all((xb >= lo) & (xb <= hi), axis=1)]
    if overlap.shape[0] == 0:
        return {"slices": list(slices), "n_points": 0, "fraction_within": float("nan"), "passed": None}
    design = basis(overlap)
    diff = design @ ca - design @ cb
    var = sa * np.einsum("ni,ij,nj->n", design, ia, design) + sb * np.einsum("ni,ij,nj->n", design, ib, design)
    within = np.abs(diff) <= 2.0 * np.sqrt(np.maximum(var, 0.0)) + 1e-12
    fraction = float(np.mean(within))
    return {
        "slices": list(slices),
        "n_points": int(overlap.shape[0]),
        "max_difference": float(np.max(np.abs(diff))),
        "fraction_within": fraction,
        "passed": fraction >= agreement,
    }
