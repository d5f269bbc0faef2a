"""Perturbed forward-backward runs and the difference quotients realizing u_(xi) and u_(xi)(xi).

The perturbed diffusion starts at x + s delta xi0 + delta^2 eta0 / 2 and is driven
by the base increments with

    diffusion  sqrt(F) sigma R,        F = 1 + 2 s delta r + delta^2 r~
    drift      F b - sqrt(F) sigma R theta,  theta = s delta pi + delta^2 pi~ / 2
    R = exp(s delta P) exp(delta^2 P~ / 2)

where (r, pi, P) and the tilde terms are read from the base trajectory's trace.
The driver-free value Y0^delta is E[Lambda (g(X^delta) + sum F f h)] with the
density Lambda = exp(sum theta.dW - |theta|^2 h / 2).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from engine.bsde import DRIVER_FREE, Basis, driver_free_samples, estimate_u_driver_free, solve_picard
from engine.errors import GuardViolationError, InvalidArgumentError
from engine.linalg import orthogonality_defect, skew_expm
from engine.problem import DomainSpec, InteriorScheme, ProblemSpec
from engine.quasi import QuasiTrajectory, evolve_first, evolve_second
from engine.rng import derive_seed
from engine.sde import PathEnsemble, chunk_bounds, integrate_paths, simulate_ensemble
from engine.stats import BASE_Z, extrapolation_weights, summarize

LOGGER = logging.getLogger(__name__)

GUARD_POLICIES = ("raise", "truncate")
ROTATION_TOLERANCE = 1e-10
DEFAULT_DELTAS = (0.1, 0.05, 0.025)
ERROR_FLOOR = 1e-12


# ---------------------------------------------------------------- guards


def _guard_ok(traj: QuasiTrajectory, delta: float, use_tilde: bool) -> np.ndarray:
    r = traj.r
    rt = traj.r_tilde if use_tilde else np.zeros_like(r)
    pit_norm = np.linalg.norm(traj.pi_tilde, axis=2) if use_tilde else 0.0
    ok = np.ones(r.shape, dtype=bool)
    for sign in (1.0, -1.0):
        factor = 1.0 + 2.0 * sign * delta * r + delta**2 * rt
        ok &= (factor >= 0.0) & (factor <= 2.0)
    ok &= delta * np.linalg.norm(traj.pi, axis=2) + 0.5 * delta**2 * pit_norm <= 1.0
    steps = np.arange(r.shape[0])[:, None]
    return ok | (steps >= traj.stop_index[None, :])


def guard_scan(traj: QuasiTrajectory, delta: float, use_tilde: bool) -> np.ndarray:
    """First step per path at which either smallness guard fails for +delta or -delta (trace length if none)."""
    ok = _guard_ok(traj, delta, use_tilde)
    steps = np.arange(ok.shape[0])[:, None]
    return np.where(~ok, steps, ok.shape[0]).min(axis=0) if ok.size else np.zeros(traj.n_paths, dtype=int)


def admissible_delta(traj: QuasiTrajectory, delta: float, use_tilde: bool, max_halvings: int = 40) -> float:
    candidate = delta
    for _ in range(max_halvings):
        if np.all(guard_scan(traj, candidate, use_tilde) >= traj.steps):
            return candidate
        candidate *= 0.5
    return 0.0


# ---------------------------------------------------------------- perturbed paths


class PathModulation:
    """Replaces (sigma, b) along the perturbed run and accumulates the time factor and density."""

    def __init__(self, traj: QuasiTrajectory, delta: float, sign: int, limit: np.ndarray, *, use_tilde: bool, h: float) -> None:
        self.traj = traj
        self.delta = float(delta)
        self.sign = int(sign)
        self.scaled = self.sign * self.delta
        self.limit = limit
        self.use_tilde = use_tilde
        self.h = h
        n = traj.n_paths
        self.time_factor = np.ones((traj.steps, n))
        self.log_weight = np.zeros(n)
        self.max_rotation_defect = 0.0

    def coefficients(self, step: int, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(F, theta, R) for ``rows`` at ``step``; identity and zero outside the admissible trace."""
        d1 = self.traj.pi.shape[2]
        m = rows.size
        factor = np.ones(m)
        theta = np.zeros((m, d1))
        rot = np.broadcast_to(np.eye(d1), (m, d1, d1)).copy()
        active = step < self.limit[rows]
        if self.delta == 0.0 or not np.any(active):
            return factor, theta, rot
        sel = rows[active]
        tr = self.traj
        ds, d2 = self.scaled, self.delta**2
        r = tr.r[step, sel]
        if self.use_tilde:
            factor[active] = 1.0 + 2.0 * ds * r + d2 * tr.r_tilde[step, sel]
            theta[active] = ds * tr.pi[step, sel] + 0.5 * d2 * tr.pi_tilde[step, sel]
            rot[active] = skew_expm(ds * tr.P[step, sel]) @ skew_expm(0.5 * d2 * tr.P_tilde[step, sel])
        else:
            factor[active] = 1.0 + 2.0 * ds * r
            theta[active] = ds * tr.pi[step, sel]
            rot[active] = skew_expm(ds * tr.P[step, sel])
        self.max_rotation_defect = max(self.max_rotation_defect, orthogonality_defect(rot[active]))
        return factor, theta, rot

    def apply(
        self, step: int, rows: np.ndarray, sig: np.ndarray, drift: np.ndarray, dw: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        if self.delta == 0.0:
            return sig, drift
        factor, theta, rot = self.coefficients(step, rows)
        root = np.sqrt(np.maximum(factor, 0.0))
        sig_eff = (sig @ rot) * root[:, None, None]
        drift_eff = factor[:, None] * drift - np.einsum("ndj,nj->nd", sig_eff, theta)
        self.log_weight[rows] += np.einsum("nj,nj->n", theta, dw[rows]) - 0.5 * np.sum(theta**2, axis=1) * self.h
        if step < self.time_factor.shape[0]:
            self.time_factor[step, rows] = factor
        return sig_eff, drift_eff


@dataclass
class PerturbationRun:
    delta: float
    sign: int
    start_shift: np.ndarray
    ensemble: PathEnsemble
    time_factor: np.ndarray
    log_weight: np.ndarray
    truncated: np.ndarray
    max_rotation_defect: float
    modulation: PathModulation = field(repr=False)

    @property
    def truncation_rate(self) -> float:
        return float(np.mean(self.truncated))

    def as_dict(self) -> dict[str, Any]:
        return {
            "delta": self.delta,
            "sign": self.sign,
            "start_shift": self.start_shift.tolist(),
            "n_paths": self.ensemble.n_paths,
            "truncation_rate": self.truncation_rate,
            "max_rotation_defect": self.max_rotation_defect,
            "capped_fraction": float(np.mean(self.ensemble.capped)),
        }


def guard_limit(traj: QuasiTrajectory, delta: float, *, use_tilde: bool, policy: str) -> np.ndarray:
    """Per-path end of the usable coefficient trace for this delta (shared by both signs)."""
    if policy not in GUARD_POLICIES:
        raise InvalidArgumentError("unknown guard policy", policy=policy)
    first = guard_scan(traj, delta, use_tilde)
    violated = first < traj.stop_index
    if np.any(violated) and policy == "raise":
        row = int(np.flatnonzero(violated)[0])
        advice = admissible_delta(traj, delta, use_tilde)
        raise GuardViolationError(
            f"delta={delta:g} breaks the smallness guards; largest admissible delta along this trace is {advice:g}",
            delta=delta,
            max_delta=advice,
            step=int(first[row]),
            path_id=row,
        )
    return np.minimum(first, traj.stop_index)


def simulate_perturbed(
    ens: PathEnsemble,
    spec: ProblemSpec,
    dom: DomainSpec,
    traj: QuasiTrajectory,
    delta: float,
    sign: int,
    *,
    use_tilde: bool = True,
    guard_policy: str = "raise",
    limit: np.ndarray | None = None,
    bisection_steps: int = 40,
) -> PerturbationRun:
    if sign not in (1, -1):
        raise InvalidArgumentError("sign must be +1 or -1", sign=sign)
    if delta < 0:
        raise InvalidArgumentError("delta must be >= 0", delta=delta)
    if traj.n_paths != ens.n_paths:
        raise InvalidArgumentError("trajectory does not belong to this ensemble")
    if limit is None:
        limit = guard_limit(traj, delta, use_tilde=use_tilde, policy=guard_policy) if delta > 0 else traj.stop_index.copy()
    eta0 = traj.eta_start if (use_tilde and traj.eta_start is not None) else np.zeros(ens.d)
    shift = sign * delta * traj.xi_start + 0.5 * delta**2 * eta0
    start = ens.x0 + shift
    if float(dom.psi(start[None, :])[0]) <= 0.0:
        raise InvalidArgumentError("perturbed start point leaves D; use a smaller delta", delta=delta, start=start.tolist())
    modulation = PathModulation(traj, delta, sign, limit, use_tilde=use_tilde, h=ens.h)
    out = integrate_paths(
        spec,
        dom,
        np.broadcast_to(start, (ens.n_paths, ens.d)),
        ens.stream(),
        ens.n_steps,
        modulation=modulation,
        bisection_steps=bisection_steps,
    )
    pert = PathEnsemble(
        x0=start,
        h=ens.h,
        t_max=ens.t_max,
        n_steps=ens.n_steps,
        seed=ens.seed,
        path_offset=ens.path_offset,
        rng_block=ens.rng_block,
        d1=ens.d1,
        meta={"delta": delta, "sign": sign},
        **out,
    )
    if modulation.max_rotation_defect > ROTATION_TOLERANCE:
        LOGGER.warning("rotation factor orthogonality defect %.2e", modulation.max_rotation_defect)
    return PerturbationRun(
        delta=float(delta),
        sign=sign,
        start_shift=shift,
        ensemble=pert,
        time_factor=modulation.time_factor,
        log_weight=modulation.log_weight,
        truncated=limit < traj.stop_index,
        max_rotation_defect=modulation.max_rotation_defect,
        modulation=modulation,
    )


def perturbed_samples(run: PerturbationRun, spec: ProblemSpec, *, method: str = DRIVER_FREE, basis: Basis | None = None, max_iter: int = 20, tol: float = 1e-6) -> np.ndarray:
    """Per-path samples whose mean is Y0^delta."""
    if method == DRIVER_FREE:
        return driver_free_samples(run.ensemble, spec, time_factor=run.time_factor, log_weight=run.log_weight)
    if basis is None:
        raise InvalidArgumentError("the Picard backend needs a regression basis")
    solution = solve_picard(run.ensemble, spec, basis, max_iter=max_iter, tol=tol, driver_terms=run.modulation.coefficients)
    return solution.samples


# ---------------------------------------------------------------- flow-derivative convergence


def flow_derivative_errors(
    ens: PathEnsemble,
    spec: ProblemSpec,
    dom: DomainSpec,
    traj: QuasiTrajectory,
    deltas: Sequence[float],
    *,
    order: int = 1,
    horizon: float = 1.0,
    guard_policy: str = "truncate",
) -> dict[str, Any]:
    """Mean over paths of sup_t |(X^delta - X)/delta - xi| (order 1) or the second-difference analogue for eta.

    The sup runs over grid times before the horizon, every exit, the trace end and
    the earliest guard truncation across the ladder.
    """
    use_tilde = order == 2
    if use_tilde and traj.eta is None:
        raise InvalidArgumentError("second-order convergence needs an evolved eta")
    limits = [guard_limit(traj, delta, use_tilde=use_tilde, policy=guard_policy) for delta in deltas]
    truncation = [float(np.mean(limit < traj.stop_index)) for limit in limits]
    window = np.minimum.reduce(limits + [traj.stop_index, np.full(ens.n_paths, int(round(horizon / ens.h)))])
    report: dict[str, Any] = {
        "order": order,
        "deltas": list(deltas),
        "truncation_rates": truncation,
        "window_mean": float(np.mean(window)) * ens.h,
        "empty_window_fraction": float(np.mean(window == 0)),
    }
    if not np.any(window > 0):
        note = "smallness guards cut every path at step 0; no flow-derivative window to measure"
        LOGGER.warning("%s (deltas %s)", note, list(deltas))
        nan = float("nan")
        return {**report, "errors": [nan] * len(deltas), "ratios": [nan] * (len(deltas) - 1), "conclusive": False, "note": note}
    errors: list[float] = []
    for delta, limit in zip(deltas, limits):
        plus = simulate_perturbed(ens, spec, dom, traj, delta, 1, use_tilde=use_tilde, limit=limit)
        runs = [plus.ensemble]
        if order == 2:
            runs.append(simulate_perturbed(ens, spec, dom, traj, delta, -1, use_tilde=True, limit=limit).ensemble)
        end = np.minimum.reduce([window] + [np.minimum(r.stop_index, r.stored_steps) for r in runs])
        sup = np.zeros(ens.n_paths)
        for i in range(int(end.max(initial=0)) + 1):
            rows = np.flatnonzero(end >= i)
            base = ens.states[min(i, ens.stored_steps), rows]
            if order == 1:
                quotient = (plus.ensemble.state_at(i)[rows] - base) / delta
                target = traj.xi[i, rows]
            else:
                quotient = (plus.ensemble.state_at(i)[rows] - 2.0 * base + runs[1].state_at(i)[rows]) / delta**2
                target = traj.eta[i, rows]
            sup[rows] = np.maximum(sup[rows], np.linalg.norm(quotient - target, axis=1))
        errors.append(float(np.mean(sup)))
    ratios = [errors[j] / errors[j + 1] if errors[j + 1] > 0 else float("inf") for j in range(len(errors) - 1)]
    conclusive = all(err > ERROR_FLOOR for err in errors)
    if not conclusive:
        LOGGER.warning("flow-derivative errors %s are at rounding level; ratios are not a convergence measurement", errors)
    return {**report, "errors": errors, "ratios": ratios, "conclusive": conclusive}


# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class EstimatorSettings:
    h: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    t_max: float | None = None
    scheme: str = "switching"
    guard_policy: str = "truncate"
    interior: InteriorScheme | None = None
    p: int = 1
    method: str = DRIVER_FREE
    basis: Basis | None = None
    picard_max_iter: int = 20
    picard_tol: float = 1e-6
    chunk_paths: int = 4096
    workers: int = 1
    rng_block: int = 4096
    bisection_steps: int = 40
    rescale_step: bool = True


def effective_step(h: float, deltas: Sequence[float], rescale: bool = True) -> float:
    """h reduced so that h <= min(delta)^2."""
    cap = min(deltas) ** 2
    if rescale and h > cap:
        LOGGER.info("time step %.2e reduced to %.2e to satisfy h <= delta^2", h, cap)
        return cap
    return h


@dataclass
class DerivativeEstimate:
    order: int
    x: list[float]
    xi0: list[float]
    deltas: list[float]
    quotient: np.ndarray
    quotient_se: np.ndarray
    extrapolated: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    weights: np.ndarray
    verdict: str
    base_value: np.ndarray
    truncation_rates: list[float]
    n_paths: int
    seed: int
    h: float
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        return {
            "order": self.order,
            "x": self.x,
            "xi0": self.xi0,
            "delta": self.deltas,
            "quotient": self.quotient.tolist(),
            "quotient_se": self.quotient_se.tolist(),
            "extrapolated": self.extrapolated.tolist(),
            "se": self.se.tolist(),
            "CI": [self.ci_low.tolist(), self.ci_high.tolist()],
            "weights": self.weights.tolist(),
            "verdict": self.verdict,
            "Y0": self.base_value.tolist(),
            "truncation_rates": self.truncation_rates,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "h": self.h,
            "notes": list(self.notes),
        }


def _validate_ladder(deltas: Sequence[float]) -> list[float]:
    ladder = [float(d) for d in deltas]
    if len(ladder) < 3:
        raise InvalidArgumentError("the delta ladder needs at least three values", deltas=ladder)
    if any(d <= 0 for d in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise InvalidArgumentError("the delta ladder must be positive and strictly decreasing", deltas=ladder)
    return ladder


def _chunk_quotients(
    spec: ProblemSpec,
    dom: DomainSpec,
    x: np.ndarray,
    xi0: np.ndarray,
    ladder: list[float],
    order: int,
    settings: EstimatorSettings,
    h: float,
    offset: int,
    count: int,
) -> dict[str, Any]:
    ens = simulate_ensemble(
        spec,
        dom,
        x,
        h,
        count,
        settings.t_max,
        settings.seed,
        path_offset=offset,
        rng_block=settings.rng_block,
        bisection_steps=settings.bisection_steps,
    )
    traj = evolve_first(ens, spec, dom, xi0, settings.scheme, interior=settings.interior, p=settings.p)
    use_tilde = order == 2
    if use_tilde:
        traj = evolve_second(ens, spec, dom, traj, interior=settings.interior)
    if settings.method == DRIVER_FREE:
        base = estimate_u_driver_free(ens, spec).samples
    else:
        base = solve_picard(ens, spec, settings.basis, max_iter=settings.picard_max_iter, tol=settings.picard_tol).samples
    quotients, truncated = [], []
    for delta in ladder:
        limit = guard_limit(traj, delta, use_tilde=use_tilde, policy=settings.guard_policy)
        truncated.append(int(np.sum(limit < traj.stop_index)))
        kwargs = dict(method=settings.method, basis=settings.basis, max_iter=settings.picard_max_iter, tol=settings.picard_tol)
        plus = perturbed_samples(simulate_perturbed(ens, spec, dom, traj, delta, 1, use_tilde=use_tilde, limit=limit), spec, **kwargs)
        if order == 1:
            quotients.append((plus - base) / delta)
        else:
            minus = perturbed_samples(simulate_perturbed(ens, spec, dom, traj, delta, -1, use_tilde=True, limit=limit), spec, **kwargs)
            quotients.append((plus - 2.0 * base + minus) / delta**2)
    return {"base": base, "quotients": np.stack(quotients, axis=1), "truncated": truncated}


def _non_monotone(quotients: np.ndarray, base_z: float) -> bool:
    """True when successive quotient means change direction with both changes significant."""
    diffs = np.diff(quotients, axis=1)
    summary = summarize(diffs)
    mean = summary.mean.reshape(diffs.shape[1], -1)
    se = summary.se.reshape(diffs.shape[1], -1)
    significant = np.abs(mean) > base_z * se
    for j in range(mean.shape[0] - 1):
        flips = np.sign(mean[j]) != np.sign(mean[j + 1])
        if np.any(flips & significant[j] & significant[j + 1]):
            return True
    return False


def _estimate(
    order: int,
    spec: ProblemSpec,
    dom: DomainSpec,
    x: Sequence[float] | np.ndarray,
    xi0: Sequence[float] | np.ndarray,
    deltas: Sequence[float],
    settings: EstimatorSettings,
) -> DerivativeEstimate:
    ladder = _validate_ladder(deltas)
    x = np.asarray(x, dtype=float).reshape(spec.d)
    xi0 = np.asarray(xi0, dtype=float).reshape(spec.d)
    if float(dom.psi(x[None, :])[0]) <= dom.delta1:
        raise InvalidArgumentError("estimation point must satisfy psi(x) > delta1", x=x.tolist())
    h = effective_step(settings.h, ladder, settings.rescale_step)

    def job(bounds: tuple[int, int]) -> dict[str, Any]:
        return _chunk_quotients(spec, dom, x, xi0, ladder, order, settings, h, *bounds)

    bounds = chunk_bounds(settings.n_paths, settings.chunk_paths)
    if settings.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]

    base = np.concatenate([p["base"] for p in parts], axis=0)
    quotients = np.concatenate([p["quotients"] for p in parts], axis=0)
    truncation = [sum(p["truncated"][j] for p in parts) / settings.n_paths for j in range(len(ladder))]
    weights = extrapolation_weights(ladder, p=1 if order == 1 else 2)
    combined = np.einsum("j,njk->nk", weights, quotients)
    per_delta = summarize(quotients)
    final = summarize(combined)
    notes: list[str] = []
    verdict = "ok"
    if _non_monotone(quotients, BASE_Z):
        verdict = "convergence-failure"
        notes.append("quotient sequence changes direction beyond its confidence bands")
    elif order == 2 and np.any((final.ci_high - final.ci_low) / 2.0 > np.abs(final.mean)):
        verdict = "inconclusive"
        notes.append("confidence half-width exceeds the estimate")
    if any(rate > 0 for rate in truncation):
        notes.append("guard truncation active: " + ", ".join(f"{d:g}:{r:.3f}" for d, r in zip(ladder, truncation)))
    LOGGER.info("order-%d estimate at %s along %s: %s (se %s)", order, x.tolist(), xi0.tolist(), final.mean, final.se)
    return DerivativeEstimate(
        order=order,
        x=x.tolist(),
        xi0=xi0.tolist(),
        deltas=ladder,
        quotient=per_delta.mean.reshape(len(ladder), -1),
        quotient_se=per_delta.se.reshape(len(ladder), -1),
        extrapolated=final.mean,
        se=final.se,
        ci_low=final.ci_low,
        ci_high=final.ci_high,
        weights=weights,
        verdict=verdict,
        base_value=summarize(base).mean,
        truncation_rates=truncation,
        n_paths=settings.n_paths,
        seed=settings.seed,
        h=h,
        notes=notes,
    )


def grad_estimate(
    spec: ProblemSpec,
    dom: DomainSpec,
    x: Sequence[float] | np.ndarray,
    xi0: Sequence[float] | np.ndarray,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    settings: EstimatorSettings = EstimatorSettings(),
) -> DerivativeEstimate:
    """Richardson-extrapolated (Y0^delta - Y0) / delta estimating u_(xi0)(x)."""
    return _estimate(1, spec, dom, x, xi0, deltas, settings)


def hessian_estimate(
    spec: ProblemSpec,
    dom: DomainSpec,
    x: Sequence[float] | np.ndarray,
    xi0: Sequence[float] | np.ndarray,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    settings: EstimatorSettings = EstimatorSettings(),
) -> DerivativeEstimate:
    """Richardson-extrapolated (Y0^delta - 2 Y0 + Y0^-delta) / delta^2 estimating u_(xi0)(xi0)(x) with eta0 = 0."""
    return _estimate(2, spec, dom, x, xi0, deltas, settings)


def central_difference(
    spec: ProblemSpec,
    dom: DomainSpec,
    x: Sequence[float] | np.ndarray,
    xi0: Sequence[float] | np.ndarray,
    delta: float,
    settings: EstimatorSettings = EstimatorSettings(),
    *,
    solver: Callable[[PathEnsemble], np.ndarray] | None = None,
) -> dict[str, Any]:
    """Plain (u(x + delta xi0) - u(x - delta xi0)) / (2 delta) from two independent ensembles."""
    x = np.asarray(x, dtype=float).reshape(spec.d)
    xi0 = np.asarray(xi0, dtype=float).reshape(spec.d)
    if solver is None:
        solver = lambda ens: estimate_u_driver_free(ens, spec).samples  # noqa: E731
    values, ses = [], []
    for sign, label in ((1.0, "central+"), (-1.0, "central-")):
        ens = simulate_ensemble(
            spec,
            dom,
            x + sign * delta * xi0,
            settings.h,
            settings.n_paths,
            settings.t_max,
            derive_seed(settings.seed, label),
            rng_block=settings.rng_block,
        )
        summary = summarize(solver(ens))
        values.append(summary.mean)
        ses.append(summary.se)
    estimate = (values[0] - values[1]) / (2.0 * delta)
    se = np.sqrt(ses[0] ** 2 + ses[1] ** 2) / (2.0 * delta)
    return {"delta": delta, "estimate": estimate.tolist(), "se": se.tolist()}


def consistency_z(a: DerivativeEstimate, central: dict[str, Any]) -> float:
    """Largest |z| between a quasi-derivative estimate and a central difference (independent errors)."""
    diff = a.extrapolated - np.asarray(central["estimate"])
    se = np.sqrt(a.se**2 + np.asarray(central["se"]) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(diff) / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, math.inf))
    return float(np.max(z))
