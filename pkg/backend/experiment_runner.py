from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from engine.barriers import (
    BarrierSpec,
    calibrate_k1,
    calibrate_lambda,
    moment_integral_samples,
    moment_integral_test,
    pilot_moment_constant,
    supermartingale_test,
)
from engine.bsde import (
    DRIVER_FREE,
    BsdeSolution,
    apriori_ratio,
    default_basis,
    estimate_u_driver_free,
    markov_consistency,
    mbeta_norm,
    pool_solutions,
    solve_picard,
)
from engine.errors import HypothesisFailure, InvalidArgumentError, QuasiFlowError
from engine.estimates import (
    BOUNDARY_TOLERANCE,
    boundary_approach_panel,
    normal_derivative_bound,
    verify_bounds,
)
from engine.perturbed import (
    DerivativeEstimate,
    EstimatorSettings,
    central_difference,
    consistency_z,
    flow_derivative_errors,
    grad_estimate,
    hessian_estimate,
)
from engine.problem import (
    ProblemBundle,
    check_h7,
    check_h10,
    check_interior_scheme,
    compute_norms,
    validate_hypotheses,
)
from engine.quasi import evolve_first, evolve_second, martingale_statistic, save_trajectory
from engine.rng import derive_seed
from engine.sde import PathEnsemble, exit_statistics, map_chunks, save_ensemble, simulate_ensemble, strong_order_check
from engine.stats import BASE_Z, two_sided_threshold
from experiment_config import ExperimentConfig, Point
from problems import euler_interval
from problems.registry import load_problem
from report_store import RunStore

LOGGER = logging.getLogger(__name__)

ORACLE_SLACK = {"solve": 0.01, "grad": 0.05, "hess": 0.15}
FLOW_RATIO_RANGE = (1.6, 2.6)
STRONG_ORDER_PATHS = 2000
EXACT_FLOWS: dict[str, Callable[[np.ndarray, float, np.ndarray], np.ndarray]] = {
    euler_interval.NAME: euler_interval.exact_flow,
}


@dataclass
class Outcome:
    payload: dict[str, Any]
    verdicts: dict[str, str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    summary: list[str] = field(default_factory=list)


@dataclass
class RunResult:
    experiment: str
    exit_status: int
    verdicts: dict[str, str]
    run_dir: Path
    summary: list[str]


# ---------------------------------------------------------------- shared helpers


def _beta(config: ExperimentConfig, bundle: ProblemBundle) -> float:
    return bundle.spec.constants.beta if config.numerics.beta is None else config.numerics.beta


def _points(config: ExperimentConfig, bundle: ProblemBundle) -> list[Point]:
    if config.points:
        for point in config.points:
            if len(point.x) != bundle.spec.d:
                raise InvalidArgumentError("point dimension differs from the problem", x=list(point.x), d=bundle.spec.d)
        return list(config.points)
    return [Point(x=tuple(bundle.dom.center))]


def _direction(point: Point, d: int) -> np.ndarray:
    if point.xi0 is not None:
        return np.asarray(point.xi0, dtype=float)
    return np.eye(d)[0]


def _basis(config: ExperimentConfig, bundle: ProblemBundle):
    return None if config.numerics.bsde_method == DRIVER_FREE else default_basis(bundle.spec, bundle.dom)


def _settings(config: ExperimentConfig, bundle: ProblemBundle, label: str) -> EstimatorSettings:
    num = config.numerics
    return EstimatorSettings(
        h=num.h,
        n_paths=num.n_paths,
        seed=derive_seed(config.seed, label),
        t_max=num.t_max,
        scheme=num.scheme,
        guard_policy=num.guard_policy,
        interior=bundle.interior,
        p=num.moment_order,
        method=num.bsde_method,
        basis=_basis(config, bundle),
        picard_max_iter=num.picard_max_iter,
        picard_tol=num.picard_tol,
        chunk_paths=num.chunk_paths,
        workers=num.workers,
        rng_block=num.rng_block,
        bisection_steps=num.bisection_steps,
    )


def _simulate(config: ExperimentConfig, bundle: ProblemBundle, dom, x0: np.ndarray, label: str) -> PathEnsemble:
    num = config.numerics
    return simulate_ensemble(
        bundle.spec,
        dom,
        x0,
        num.h,
        num.n_paths,
        num.t_max,
        derive_seed(config.seed, label),
        rng_block=num.rng_block,
        bisection_steps=num.bisection_steps,
        progress=num.progress,
    )


def _overall(verdicts: dict[str, str]) -> str:
    return "pass" if verdicts and all(v == "pass" for v in verdicts.values()) else "fail"


# ---------------------------------------------------------------- hypothesis gate


def hypothesis_gate(config: ExperimentConfig, bundle: ProblemBundle) -> tuple[dict[str, Any], list[str]]:
    """Sample-based hypothesis checks run before every experiment."""
    spec, dom, num = bundle.spec, bundle.dom, config.numerics
    grid = dom.grid(num.grid_resolution)
    report = validate_hypotheses(spec, dom, grid)
    failed = report.failed()
    constants = spec.constants
    beta = _beta(config, bundle)
    h7 = check_h7(constants.mu, constants.L, constants.L0, beta, constants.vartheta)
    if not h7.passed:
        failed.append("H7")
        failed.extend(f"H7[{clause}]" for clause, ok in h7.clauses.items() if not ok)
    payload: dict[str, Any] = {"checks": report.as_dict(), "H7": h7.as_dict(), "beta": beta}
    if bundle.interior is not None:
        try:
            payload["interior_scheme"] = check_interior_scheme(bundle.interior, grid, seed=config.seed)
        except InvalidArgumentError as exc:
            payload["interior_scheme"] = exc.to_dict()
            failed.append("Q")
        inner = grid[dom.in_interior_region(grid)]
        if inner.shape[0]:
            gen = np.random.Generator(np.random.Philox(key=np.array([derive_seed(config.seed, "h10"), 0], dtype=np.uint64)))
            ys = gen.standard_normal(inner.shape)
            ys /= np.linalg.norm(ys, axis=1, keepdims=True)
            h10 = check_h10(spec, dom, bundle.interior, num.moment_order, beta, inner, ys)
            payload["H10"] = {**h10.as_dict(), "p": num.moment_order}
            if not h10.passed:
                failed.append("H10")
    payload["failed"] = failed
    payload["passed"] = not failed
    return payload, failed


# ---------------------------------------------------------------- handlers


def _solve(config: ExperimentConfig, bundle: ProblemBundle, store: RunStore) -> Outcome:
    spec, dom, num = bundle.spec, bundle.dom, config.numerics
    basis = _basis(config, bundle)
    norms = compute_norms(spec, dom, num.grid_resolution, pair_budget=num.pair_budget, seed=config.seed) if basis is not None else None
    beta = _beta(config, bundle)
    results, rows, verdicts, summary = [], [], {}, []
    for i, point in enumerate(_points(config, bundle)):
        diagnostics: dict[str, Any] = {}

        def reduce(ens: PathEnsemble) -> tuple[BsdeSolution, PathEnsemble]:
            if basis is None:
                solution = estimate_u_driver_free(ens, spec)
            else:
                solution = solve_picard(ens, spec, basis, max_iter=num.picard_max_iter, tol=num.picard_tol)
                if ens.path_offset == 0:
                    diagnostics["mbeta"] = mbeta_norm(solution, ens, beta).as_dict()
                    diagnostics["apriori"] = apriori_ratio(solution, ens, norms.g0, norms.f0)
                    first = max(1, int(round(0.05 / ens.h)))
                    if 2 * first < solution.targets.shape[0]:
                        diagnostics["markov"] = markov_consistency(solution, ens, basis, (first, 2 * first))
                solution.Y = solution.Z = solution.targets = None
            # exit statistics only need stop data
            return solution, dataclasses.replace(ens, states=ens.states[:1])

        parts = map_chunks(
            reduce,
            spec,
            dom,
            point.x,
            num.h,
            num.n_paths,
            derive_seed(config.seed, f"solve-{i}"),
            t_max=num.t_max,
            chunk_paths=num.chunk_paths,
            workers=num.workers,
            rng_block=num.rng_block,
            bisection_steps=num.bisection_steps,
        )
        solution = pool_solutions([s for s, _ in parts])
        exits = exit_statistics([e for _, e in parts], dom)
        entry: dict[str, Any] = {**solution.as_dict(), "exit": exits.as_dict(), "diagnostics": diagnostics}
        verdicts[f"exit-{i}"] = exits.verdict
        exact = None
        if bundle.exact is not None:
            exact = bundle.exact.u(np.asarray(point.x, dtype=float)[None, :])[0]
            err = np.abs(solution.Y0 - exact)
            ok = bool(np.all(err <= BASE_Z * solution.se + ORACLE_SLACK["solve"]))
            entry["oracle"] = {"exact": exact.tolist(), "abs_error": err.tolist(), "passed": ok}
            verdicts[f"oracle-{i}"] = "pass" if ok else "fail"
        if not solution.converged:
            verdicts[f"picard-{i}"] = "fail"
        results.append(entry)
        rows.append(
            {
                "x": list(point.x),
                "Y0": solution.Y0.tolist(),
                "se": solution.se.tolist(),
                "ci_low": solution.ci_low.tolist(),
                "ci_high": solution.ci_high.tolist(),
                "exact": None if exact is None else exact.tolist(),
                "exit_mean": exits.mean,
                "exit_se": exits.se,
                "psi_x0": exits.psi_x0,
            }
        )
        summary.append(f"u{list(point.x)} = {solution.Y0.tolist()} +/- {solution.se.tolist()} (exit {exits.mean:.4g} <= {exits.psi_x0:.4g}: {exits.verdict})")
    return Outcome({"results": results}, verdicts, rows, summary)


def _derivative(config: ExperimentConfig, bundle: ProblemBundle, store: RunStore) -> Outcome:
    order = 1 if config.experiment == "grad" else 2
    spec, dom, num = bundle.spec, bundle.dom, config.numerics
    estimator = grad_estimate if order == 1 else hessian_estimate
    results, rows, verdicts, summary = [], [], {}, []
    for i, point in enumerate(_points(config, bundle)):
        x = np.asarray(point.x, dtype=float)
        xi0 = _direction(point, spec.d)
        settings = _settings(config, bundle, f"{config.experiment}-{i}")
        estimate: DerivativeEstimate = estimator(spec, dom, x, xi0, num.delta_ladder, settings)
        entry: dict[str, Any] = estimate.as_dict()
        verdict = "pass" if estimate.verdict == "ok" else estimate.verdict
        if order == 1:
            solver = None
            if settings.basis is not None:
                solver = lambda ens: solve_picard(ens, spec, settings.basis, max_iter=num.picard_max_iter, tol=num.picard_tol).samples  # noqa: E731
            central = central_difference(spec, dom, x, xi0, num.delta_ladder[0], settings, solver=solver)
            entry["central_difference"] = {**central, "z": consistency_z(estimate, central)}
        if bundle.exact is not None:
            xs = x[None, :]
            if order == 1:
                exact = np.einsum("kd,d->k", bundle.exact.u_x(xs)[0], xi0)
            else:
                exact = np.einsum("kde,d,e->k", bundle.exact.u_xx(xs)[0], xi0, xi0)
            half = (estimate.ci_high - estimate.ci_low) / 2.0
            ok = bool(np.all(np.abs(estimate.extrapolated - exact) <= half + ORACLE_SLACK[config.experiment]))
            entry["oracle"] = {"exact": exact.tolist(), "passed": ok}
            if verdict == "pass" and not ok:
                verdict = "fail"
        verdicts[f"point-{i}"] = verdict
        results.append(entry)
        for j, delta in enumerate(estimate.deltas):
            rows.append(
                {
                    "x": estimate.x,
                    "xi0": estimate.xi0,
                    "delta": delta,
                    "quotient": estimate.quotient[j].tolist(),
                    "quotient_se": estimate.quotient_se[j].tolist(),
                    "truncation_rate": estimate.truncation_rates[j],
                }
            )
        summary.append(f"{config.experiment} at {estimate.x} along {estimate.xi0}: {estimate.extrapolated.tolist()} +/- {estimate.se.tolist()} ({verdict})")
    return Outcome({"results": results}, verdicts, rows, summary)


def _verify_quasi(config: ExperimentConfig, bundle: ProblemBundle, store: RunStore) -> Outcome:
    spec, dom, num = bundle.spec, bundle.dom, config.numerics
    point = _points(config, bundle)[0]
    x0 = np.asarray(point.x, dtype=float)
    xi0 = _direction(point, spec.d)
    ens = _simulate(config, bundle, dom, x0, "quasi")
    traj = evolve_first(
        ens, spec, dom, xi0, num.scheme, interior=bundle.interior, p=num.moment_order, localization=num.localization, bisection_steps=num.bisection_steps
    )
    traj = evolve_second(ens, spec, dom, traj, interior=bundle.interior)
    save_ensemble(ens, store.path_for("paths.npz"))
    save_trajectory(traj, store.path_for("paths.traj.npz"))
    payload: dict[str, Any] = {"x0": x0.tolist(), "xi0": xi0.tolist(), "scheme": num.scheme, "activation": traj.activation()}
    verdicts: dict[str, str] = {}
    rows: list[dict[str, Any]] = []
    summary: list[str] = []

    if bundle.harmonic_panel:
        threshold = two_sided_threshold(len(bundle.harmonic_panel) * len(num.checkpoints))
        for order in (1, 2):
            reports = [martingale_statistic(v, spec, dom, ens, traj, num.checkpoints, order=order) for v in bundle.harmonic_panel]
            worst = max(r.max_abs_z for r in reports)
            verdicts[f"martingale-{order}"] = "pass" if worst <= threshold else "fail"
            payload[f"martingale_{order}"] = {"threshold": threshold, "max_abs_z": worst, "rows": [row for r in reports for row in r.as_rows()]}
            rows.extend(row for r in reports for row in r.as_rows())
            summary.append(f"order-{order} martingale drift: max |z| {worst:.3f} vs {threshold:.3f}")
    else:
        summary.append("no harmonic test functions declared; martingale panel skipped")

    low, high = FLOW_RATIO_RANGE
    for order in (1, 2):
        flow = flow_derivative_errors(ens, spec, dom, traj, num.delta_ladder, order=order, guard_policy=num.guard_policy)
        payload[f"flow_{order}"] = flow
        if not flow["conclusive"]:
            verdicts[f"flow-{order}"] = "inconclusive"
            summary.append(f"order-{order} flow-derivative check inconclusive (truncation {flow['truncation_rates']})")
            continue
        ok = all(low <= r <= high for r in flow["ratios"])
        verdicts[f"flow-{order}"] = "pass" if ok else "fail"
        summary.append(f"order-{order} flow-derivative error ratios {[round(r, 3) for r in flow['ratios']]}")

    exact_flow = EXACT_FLOWS.get(spec.name)
    if exact_flow is not None:
        block = 16 * num.h
        t_fixed = block * max(1, round(0.1 / block))
        strong = strong_order_check(
            spec,
            x0,
            exact_flow,
            t_fixed=t_fixed,
            h=num.h,
            n_paths=min(num.n_paths, STRONG_ORDER_PATHS),
            seed=derive_seed(config.seed, "strong-order"),
        )
        payload["strong_order"] = strong.as_dict()
        verdicts["strong-order"] = "pass" if strong.passed else "fail"
        summary.append(f"strong order estimates {[round(o, 3) for o in strong.orders]}")
    return Outcome(payload, verdicts, rows, summary)


def _verify_barriers(config: ExperimentConfig, bundle: ProblemBundle, store: RunStore) -> Outcome:
    spec, num = bundle.spec, config.numerics
    beta = _beta(config, bundle)
    p = num.moment_order
    payload: dict[str, Any] = {"beta": beta}
    verdicts: dict[str, str] = {}
    summary: list[str] = []

    if num.barrier_lambda is None:
        calibration = calibrate_lambda(bundle.dom, K1=num.k1, p=p, grid_resolution=num.grid_resolution)
        payload["lambda_calibration"] = calibration.as_dict()
        verdicts["ordering"] = "pass" if calibration.passed else "fail"
        lam = calibration.lam
    else:
        lam = num.barrier_lambda
        payload["lambda_calibration"] = {"lambda": lam, "calibrated": False}
    region = bundle.dom.with_region(lam)
    summary.append(f"barrier lambda {lam:.4g} (delta1 {region.delta1:.4g})")

    point = _points(config, bundle)[0]
    xi0 = _direction(point, spec.d)
    # odd barriers start inside the boundary layer, even ones at the configured point
    odd_start = region.level_points(math.sqrt(region.delta1 * region.lam), 1)[0]
    even_start = np.asarray(point.x, dtype=float)

    def run(kind: str, k1: float, label: str):
        bspec = BarrierSpec(kind, lam, k1, p, calibrated=label != "pilot")
        x0 = odd_start if bspec.family == "odd" else even_start
        ens = _simulate(config, bundle, region, x0, f"{kind}-{label}")
        traj = evolve_first(
            ens, spec, region, xi0, bspec.scheme, interior=bundle.interior, p=bspec.p, localization=num.localization, bisection_steps=num.bisection_steps
        )
        return bspec, ens, traj, supermartingale_test(bspec, region, ens, traj, num.checkpoints, beta=beta)

    tests, moments, rows = {}, {}, []
    for kind in ("B1", "B2", "B3", "B4"):
        k1 = num.k1
        bspec, ens, traj, pilot = run(kind, k1, "pilot")
        if bspec.family == "odd" and not pilot.passed:
            calibration = calibrate_k1(lambda value: run(kind, value, "pilot")[3], start=k1)
            payload.setdefault("k1_calibration", {})[kind] = {"K1": calibration.K1, "passed": calibration.passed, "history": calibration.history}
            k1 = calibration.K1
        pilot_samples = moment_integral_samples(bspec, region, ens, traj, beta)
        constant = pilot_moment_constant(pilot_samples, pilot.start_value)
        bspec, ens, traj, report = run(kind, k1, "confirm")
        moment = moment_integral_test(moment_integral_samples(bspec, region, ens, traj, beta), report.start_value, constant)
        tests[kind] = report.as_dict()
        moments[kind] = moment
        verdicts[kind] = report.verdict
        verdicts[f"{kind}-moment"] = "pass" if moment["passed"] else "fail"
        for t, mean, se, z in zip(report.checkpoints, report.means, report.se, report.z):
            rows.append({"barrier": kind, "checkpoint": t, "mean": mean, "se": se, "z": z, "start_value": report.start_value, "K1": k1})
        summary.append(f"{kind} ({report.scheme}): {report.verdict}, max z {max(report.z):.3f} vs {report.threshold:.3f}")
    payload["supermartingale"] = tests
    payload["moment_integrals"] = moments
    return Outcome(payload, verdicts, rows, summary)


def _boundary_points(config: ExperimentConfig, bundle: ProblemBundle) -> list[np.ndarray]:
    dom = bundle.dom
    chosen = [np.asarray(p.x, dtype=float) for p in config.points]
    chosen = [y for y in chosen if abs(float(dom.psi(y[None, :])[0])) <= BOUNDARY_TOLERANCE]
    return chosen or [dom.level_points(0.0, 1)[0]]


def _verify_bounds(config: ExperimentConfig, bundle: ProblemBundle, store: RunStore) -> Outcome:
    spec, dom, num = bundle.spec, bundle.dom, config.numerics
    norms = compute_norms(spec, dom, num.grid_resolution, pair_budget=num.pair_budget, seed=derive_seed(config.seed, "norms"))
    panel = boundary_approach_panel(dom, num.panel_size)
    report = verify_bounds(
        num.order,
        bundle,
        panel,
        norms,
        source=num.derivative_source,
        calibration_fraction=num.calibration_fraction,
        seed=derive_seed(config.seed, "panel"),
        deltas=num.delta_ladder,
        settings=_settings(config, bundle, "panel"),
        progress=num.progress,
    )
    verdicts = {f"bound-{num.order}": report.verdict}
    summary = [f"order-{num.order} bound: N={report.N_calibrated:.4g}, held-out max {report.held_out_max:.4g} ({report.verdict})"]
    normal = []
    # the normal-derivative constant is floored at 1 so a small panel N cannot undercut it
    constant = max(report.N_calibrated, 1.0)
    for j, y in enumerate(_boundary_points(config, bundle)):
        nd = normal_derivative_bound(
            bundle,
            y,
            norms,
            N=constant,
            epsilons=num.epsilon_ladder,
            h=num.epsilon_step,
            n_paths=num.n_paths,
            seed=derive_seed(config.seed, f"normal-{j}"),
            method=num.bsde_method,
        )
        normal.append(nd.as_dict())
        verdicts[f"normal-{j}"] = nd.verdict
        summary.append(f"|u_n({nd.y})| = {nd.measured:.4g} +/- {nd.measured_se:.2g} vs bound {nd.bound:.4g} ({nd.verdict})")
    payload = {"norms": norms.as_dict(), "bounds": report.as_dict(), "normal_derivative": normal}
    return Outcome(payload, verdicts, report.as_rows(), summary)


HANDLERS: dict[str, Callable[[ExperimentConfig, ProblemBundle, RunStore], Outcome]] = {
    "solve": _solve,
    "grad": _derivative,
    "hess": _derivative,
    "verify-quasi": _verify_quasi,
    "verify-barriers": _verify_barriers,
    "verify-bounds": _verify_bounds,
}


# ---------------------------------------------------------------- entry point


def run_experiment(config: ExperimentConfig, *, force: bool = False) -> RunResult:
    """Gate on hypotheses, run one experiment and write its reports; exit status 0 iff every verdict passes."""
    num = config.numerics
    bundle = load_problem(config.problem, lam=num.lam, delta1=num.delta1, fd_tolerance=num.fd_tolerance)
    store = RunStore(config.output, config.experiment, config.as_dict())
    LOGGER.info("running %s on %s (seed %d) into %s", config.experiment, bundle.spec.name, config.seed, store.run_dir)
    try:
        gate, failed = hypothesis_gate(config, bundle)
        store.write_json("hypotheses.json", gate)
        if config.experiment == "hypotheses":
            status = 3 if failed else 0
            verdicts = {"hypotheses": "fail" if failed else "pass"}
            summary = ["hypotheses: " + ("failed " + ", ".join(failed) if failed else "all checks pass")]
            store.write_summary(summary)
            store.write_metadata(exit_status=status)
            return RunResult(config.experiment, status, verdicts, store.run_dir, summary)
        if failed:
            if not force:
                raise HypothesisFailure("hypothesis checks failed: " + ", ".join(failed), failed=failed)
            LOGGER.warning("hypotheses %s failed; continuing because of --force", ", ".join(failed))

        outcome = HANDLERS[config.experiment](config, bundle, store)
        verdict = _overall(outcome.verdicts)
        store.write_json(f"{config.experiment}.json", {**outcome.payload, "verdicts": outcome.verdicts, "verdict": verdict, "forced": bool(failed)})
        if outcome.rows:
            store.write_csv(f"{config.experiment}.csv", outcome.rows)
        summary = [f"{config.experiment} on {bundle.spec.name}: {verdict}", *outcome.summary]
        if failed:
            summary.append("forced past failed hypotheses: " + ", ".join(failed))
        store.write_summary(summary)
        status = 0 if verdict == "pass" else 1
        store.write_metadata(exit_status=status)
        LOGGER.info("%s finished with verdict %s", config.experiment, verdict)
        return RunResult(config.experiment, status, outcome.verdicts, store.run_dir, summary)
    except QuasiFlowError as exc:
        store.write_metadata(exit_status=exc.exit_status, extra={"error": exc.to_dict()})
        raise
