"""Barrier functions for quasi-derivative moments and their statistical supermartingale tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from engine.errors import DomainError, InvalidArgumentError
from engine.problem import DomainSpec, ray_directions
from engine.quasi import QuasiTrajectory
from engine.sde import PathEnsemble
from engine.stats import BASE_Z, one_sided_threshold, summarize, z_scores

LOGGER = logging.getLogger(__name__)

_NAMED = {"B1": ("odd", 1), "B2": ("even", 1), "B3": ("odd", 2), "B4": ("even", 2)}
PAIRED_SCHEME = {"odd": "boundary", "even": "interior"}


def _phi(lam: float, psi: np.ndarray) -> np.ndarray:
    return lam**2 + psi - psi**2 / (4.0 * lam)


@dataclass(frozen=True)
class BarrierSpec:
    """``kind`` is B1..B4 or the general ``odd`` (B_{2p-1}) / ``even`` (B_{2p}) families."""

    kind: str
    lam: float
    K1: float = 1.0
    p: int = 1
    calibrated: bool = False

    def __post_init__(self) -> None:
        if self.kind in _NAMED:
            order = _NAMED[self.kind][1]
            if self.p != order:
                object.__setattr__(self, "p", order)
        elif self.kind not in ("odd", "even"):
            raise InvalidArgumentError("unknown barrier kind", kind=self.kind)
        if not 0.0 < self.lam < 1.0:
            raise InvalidArgumentError("barrier lambda must lie in (0, 1)", lam=self.lam)
        if self.K1 < 1.0:
            raise InvalidArgumentError("K1 must be >= 1", K1=self.K1)
        if int(self.p) != self.p or self.p < 1:
            raise InvalidArgumentError("moment order must be a positive integer", p=self.p)

    @property
    def family(self) -> str:
        return _NAMED[self.kind][0] if self.kind in _NAMED else self.kind

    @property
    def degree(self) -> int:
        return 4 * self.p

    @property
    def scheme(self) -> str:
        return PAIRED_SCHEME[self.family]

    @property
    def label(self) -> str:
        if self.kind in _NAMED:
            return self.kind
        return f"B{2 * self.p - 1}" if self.family == "odd" else f"B{2 * self.p}"

    def as_dict(self) -> dict[str, Any]:
        return {"barrier": self.label, "lambda": self.lam, "K1": self.K1, "p": self.p, "calibrated": self.calibrated}


def eval_barrier(bspec: BarrierSpec, dom: DomainSpec, x: np.ndarray | None, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barrier values and the phi used (NaN where not evaluated) at batched (x, y)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    deg = bspec.degree
    norm_pow = np.linalg.norm(y, axis=1) ** deg
    if bspec.family == "even":
        phis = np.full(y.shape[0], np.nan) if x is None else _phi(bspec.lam, dom.psi(np.atleast_2d(x)))
        return bspec.lam**0.75 * norm_pow, phis
    if x is None:
        raise InvalidArgumentError("odd barriers depend on x")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    psi = dom.psi(x)
    if np.any(psi <= 0.0):
        row = int(np.flatnonzero(psi <= 0.0)[0])
        raise DomainError("barrier evaluated outside D", x=x[row].tolist(), psi=float(psi[row]))
    lam, p = bspec.lam, bspec.p
    phis = _phi(lam, psi)
    psi_y = np.einsum("nd,nd->n", dom.psi_x(x), y)
    first = (lam + np.sqrt(psi) + psi) * norm_pow
    second = bspec.K1 * phis ** ((8 * p - 1) / 2.0) * psi_y ** (4 * p) / psi ** (4 * p - 1)
    return first + second, phis


def level_tolerance(level: float) -> float:
    return max(min(1e-6, 1e-3 * level), 1e-15)


def direction_panel(d: int, count: int = 8) -> np.ndarray:
    return ray_directions(d, count)


@dataclass(frozen=True)
class OrderingReport:
    passed: bool
    margin_upper: float
    margin_lower: float
    witness_upper: dict[str, list[float]]
    witness_lower: dict[str, list[float]]
    lam: float

    def as_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "lambda": self.lam,
            "margin_upper": self.margin_upper,
            "margin_lower": self.margin_lower,
            "witness_upper": self.witness_upper,
            "witness_lower": self.witness_lower,
        }


def _check_level(dom: DomainSpec, points: np.ndarray, level: float) -> None:
    dev = np.abs(dom.psi(points) - level)
    tol = level_tolerance(level)
    if np.any(dev > tol):
        row = int(np.argmax(dev))
        raise InvalidArgumentError("sample off the level set", level=level, point=points[row].tolist(), deviation=float(dev[row]))


def ordering_check(
    dom: DomainSpec,
    odd: BarrierSpec,
    even: BarrierSpec,
    upper_points: np.ndarray,
    lower_points: np.ndarray,
    ys: np.ndarray,
) -> OrderingReport:
    """B_odd >= 4 B_even on {psi = lambda} and 4 B_odd <= B_even on {psi = lambda^2}."""
    if odd.family != "odd" or even.family != "even" or odd.lam != even.lam:
        raise InvalidArgumentError("ordering compares an odd and an even barrier with the same lambda")
    lam = odd.lam
    upper_points = np.atleast_2d(upper_points)
    lower_points = np.atleast_2d(lower_points)
    _check_level(dom, upper_points, lam)
    _check_level(dom, lower_points, lam**2)
    ys = np.atleast_2d(ys)

    def margins(points: np.ndarray, upper: bool) -> tuple[float, dict[str, list[float]]]:
        xs = np.repeat(points, ys.shape[0], axis=0)
        yy = np.tile(ys, (points.shape[0], 1))
        b_odd, _ = eval_barrier(odd, dom, xs, yy)
        b_even, _ = eval_barrier(even, dom, xs, yy)
        values = b_odd - 4.0 * b_even if upper else b_even - 4.0 * b_odd
        row = int(np.argmin(values))
        return float(values[row]), {"x": xs[row].tolist(), "y": yy[row].tolist()}

    up, w_up = margins(upper_points, True)
    low, w_low = margins(lower_points, False)
    return OrderingReport(up >= 0.0 and low >= 0.0, up, low, w_up, w_low, lam)


def phi_bounds_check(dom: DomainSpec, lam: float, points: np.ndarray) -> dict[str, Any]:
    """lambda^2 <= phi <= 2 lambda and psi <= 2 phi on points of {0 < psi < lambda}."""
    psi = dom.psi(np.atleast_2d(points))
    psi = psi[(psi > 0.0) & (psi < lam)]
    if psi.size == 0:
        return {"passed": True, "n_points": 0}
    phis = _phi(lam, psi)
    low = float(np.min(phis - lam**2))
    high = float(np.min(2.0 * lam - phis))
    ratio = float(np.min(2.0 * phis - psi))
    return {
        "passed": low >= 0.0 and high >= 0.0 and ratio >= 0.0,
        "n_points": int(psi.size),
        "margin_lower": low,
        "margin_upper": high,
        "margin_psi": ratio,
    }


@dataclass(frozen=True)
class LambdaCalibration:
    lam: float
    halvings: int
    passed: bool
    history: list[dict[str, Any]] = field(default_factory=list)
    ordering: OrderingReport | None = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "halvings": self.halvings,
            "passed": self.passed,
            "history": self.history,
            "ordering": None if self.ordering is None else self.ordering.as_dict(),
        }


def calibrate_lambda(
    dom: DomainSpec,
    *,
    K1: float = 1.0,
    p: int = 1,
    start: float = 0.3,
    max_halvings: int = 40,
    n_level: int = 100,
    n_dirs: int = 8,
    grid_resolution: int = 33,
) -> LambdaCalibration:
    """Halve lambda from ``start`` until the ordering lemma and the phi bounds both hold."""
    ys = direction_panel(dom.d, n_dirs)
    grid = dom.grid(grid_resolution)
    history: list[dict[str, Any]] = []
    lam = start
    for halving in range(max_halvings + 1):
        odd = BarrierSpec("odd", lam, K1, p)
        even = BarrierSpec("even", lam, K1, p)
        region = dom.with_region(lam)
        upper = region.level_points(lam, n_level)
        lower = region.level_points(lam**2, n_level)
        report = ordering_check(dom, odd, even, upper, lower, ys)
        bounds = phi_bounds_check(dom, lam, np.concatenate([grid, upper, lower]))
        history.append({"lambda": lam, "margin_upper": report.margin_upper, "margin_lower": report.margin_lower, "phi_bounds": bounds["passed"]})
        if report.passed and bounds["passed"]:
            LOGGER.info("lambda calibrated to %.3e after %d halvings", lam, halving)
            return LambdaCalibration(lam, halving, True, history, report)
        LOGGER.debug("lambda %.3e not small enough (margins %.3e, %.3e)", lam, report.margin_upper, report.margin_lower)
        lam *= 0.5
    LOGGER.warning("lambda calibration did not converge within %d halvings", max_halvings)
    return LambdaCalibration(lam * 2.0, max_halvings, False, history, report)


# ---------------------------------------------------------------- supermartingale tests


def _check_pairing(bspec: BarrierSpec, traj: QuasiTrajectory) -> None:
    if traj.scheme != bspec.scheme:
        raise InvalidArgumentError(
            f"{bspec.label} pairs with the {bspec.scheme} scheme, trajectory uses {traj.scheme}",
            barrier=bspec.label,
            scheme=traj.scheme,
        )
    if bspec.family == "odd" and traj.p != bspec.p:
        raise InvalidArgumentError("moment order of barrier and trajectory differ", barrier_p=bspec.p, trajectory_p=traj.p)


def barrier_samples(
    bspec: BarrierSpec,
    dom: DomainSpec,
    ens: PathEnsemble,
    traj: QuasiTrajectory,
    step: int,
    beta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Discounted barrier and discounted sqrt-barrier at min(t, tau) per path."""
    cols = np.arange(ens.n_paths)
    stopped = traj.stop_index <= step
    idx = np.minimum(step, traj.stop_index)
    x = np.where(stopped[:, None], traj.stop_state, ens.states[np.minimum(idx, ens.stored_steps), cols])
    y = np.where(stopped[:, None], traj.stop_xi, traj.xi[idx, cols])
    values, _ = eval_barrier(bspec, dom, x, y)
    if bspec.family == "even":
        t = np.where(stopped, traj.stop_time, step * ens.h)
        return np.exp(4.0 * bspec.p * beta * t) * values, np.exp(2.0 * bspec.p * beta * t) * np.sqrt(values)
    return values, np.sqrt(values)


@dataclass(frozen=True)
class SupermartingaleReport:
    barrier: BarrierSpec
    scheme: str
    x0: list[float]
    xi0: list[float]
    checkpoints: list[float]
    start_value: float
    means: list[float]
    se: list[float]
    z: list[float]
    sqrt_means: list[float]
    sqrt_z: list[float]
    threshold: float
    verdict: str
    n: int
    seed: int
    localization: float | None
    activation: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def as_dict(self) -> dict[str, Any]:
        return {
            **self.barrier.as_dict(),
            "scheme": self.scheme,
            "x0": self.x0,
            "xi0": self.xi0,
            "checkpoints": self.checkpoints,
            "start_value": self.start_value,
            "mean": self.means,
            "se": self.se,
            "z": self.z,
            "sqrt_mean": self.sqrt_means,
            "sqrt_z": self.sqrt_z,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "n": self.n,
            "seed": self.seed,
            "localization": self.localization,
            "activation": self.activation,
        }


def supermartingale_test(
    bspec: BarrierSpec,
    dom: DomainSpec,
    ens: PathEnsemble,
    traj: QuasiTrajectory,
    checkpoints: Sequence[float],
    *,
    beta: float,
    base_z: float = BASE_Z,
) -> SupermartingaleReport:
    """One-sided z-tests of E[B_{t ^ tau}] <= B_0 with Bonferroni over checkpoints, base and sqrt variant."""
    _check_pairing(bspec, traj)
    if traj.localization is None:
        LOGGER.warning("supermartingale test on an unlocalized trajectory; fourth moments may be heavy tailed")
    start, _ = eval_barrier(bspec, dom, ens.x0[None, :], traj.xi_start[None, :])
    b0 = float(start[0])
    threshold = one_sided_threshold(len(checkpoints), base_z)
    means, ses, zs, sq_means, sq_zs = [], [], [], [], []
    for t in checkpoints:
        step = int(round(t / ens.h))
        base, root = barrier_samples(bspec, dom, ens, traj, step, beta)
        s_base, s_root = summarize(base), summarize(root)
        means.append(float(s_base.mean[0]))
        ses.append(float(s_base.se[0]))
        zs.append(float(z_scores(s_base.mean, s_base.se, b0)[0]))
        sq_means.append(float(s_root.mean[0]))
        sq_zs.append(float(z_scores(s_root.mean, s_root.se, np.sqrt(b0))[0]))
    base_ok = all(z <= threshold for z in zs)
    root_ok = all(z <= threshold for z in sq_zs)
    verdict = "pass" if base_ok and root_ok else ("fail-sqrt-only" if base_ok else "fail")
    return SupermartingaleReport(
        barrier=bspec,
        scheme=traj.scheme,
        x0=ens.x0.tolist(),
        xi0=traj.xi_start.tolist(),
        checkpoints=list(checkpoints),
        start_value=b0,
        means=means,
        se=ses,
        z=zs,
        sqrt_means=sq_means,
        sqrt_z=sq_zs,
        threshold=threshold,
        verdict=verdict,
        n=ens.n_paths,
        seed=ens.seed,
        localization=traj.localization,
        activation=traj.activation(),
    )


def moment_integral_samples(
    bspec: BarrierSpec,
    dom: DomainSpec,
    ens: PathEnsemble,
    traj: QuasiTrajectory,
    beta: float,
) -> np.ndarray:
    """Per-path quadrature of the moment integrals bounded by N B(x0, xi0).

    Odd barriers: sum (|xi|^{4p} + psi_(xi)^{4p} / psi^{4p}) h up to the region exit.
    Even barriers: sum e^{4p beta t} |xi|^{4p} h.
    """
    deg = bspec.degree
    total = np.zeros(ens.n_paths)
    for i in range(traj.steps):
        rows = np.flatnonzero(traj.stop_index > i)
        if rows.size == 0:
            break
        xi = traj.xi[i, rows]
        term = np.linalg.norm(xi, axis=1) ** deg
        if bspec.family == "odd":
            x = ens.states[i, rows]
            term = term + (np.einsum("nd,nd->n", dom.psi_x(x), xi) / dom.psi(x)) ** deg
        else:
            term = term * np.exp(4.0 * bspec.p * beta * i * ens.h)
        total[rows] += term * ens.h
    return total


def pilot_moment_constant(samples: np.ndarray, start_value: float, base_z: float = BASE_Z) -> float:
    """Empirical N with E[integral] <= N B(x0, xi0), taken at the upper z-bound of the pilot mean."""
    s = summarize(samples)
    if start_value <= 0.0:
        return float("inf") if s.mean[0] > 0 else 0.0
    return float((s.mean[0] + base_z * s.se[0]) / start_value)


def moment_integral_test(samples: np.ndarray, start_value: float, constant: float, base_z: float = BASE_Z) -> dict[str, Any]:
    s = summarize(samples)
    bound = constant * start_value
    z = float(z_scores(s.mean, s.se, bound)[0])
    return {"mean": float(s.mean[0]), "se": float(s.se[0]), "bound": bound, "N": constant, "z": z, "passed": z <= base_z}


@dataclass(frozen=True)
class K1Calibration:
    K1: float
    passed: bool
    history: list[dict[str, Any]]


def calibrate_k1(
    run_test: Callable[[float], SupermartingaleReport],
    *,
    start: float = 1.0,
    factor: float = 2.0,
    max_steps: int = 10,
) -> K1Calibration:
    """Raise K1 geometrically until a pilot supermartingale test passes; the result is then frozen."""
    k1 = start
    history: list[dict[str, Any]] = []
    for _ in range(max_steps + 1):
        report = run_test(k1)
        history.append({"K1": k1, "verdict": report.verdict, "max_z": max(report.z + report.sqrt_z)})
        if report.passed:
            return K1Calibration(k1, True, history)
        k1 *= factor
    LOGGER.warning("K1 calibration failed up to K1=%.3g", k1 / factor)
    return K1Calibration(k1 / factor, False, history)
