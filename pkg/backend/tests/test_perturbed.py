from __future__ import annotations

import numpy as np
import pytest

from engine.errors import GuardViolationError, InvalidArgumentError
from engine.perturbed import (
    EstimatorSettings,
    admissible_delta,
    central_difference,
    consistency_z,
    effective_step,
    flow_derivative_errors,
    grad_estimate,
    guard_limit,
    hessian_estimate,
    simulate_perturbed,
)
from engine.quasi import evolve_first
from engine.sde import simulate_ensemble
from problems import euler_interval, harmonic_disk

E1 = np.array([1.0, 0.0])


@pytest.fixture()
def disk_bundle():
    return harmonic_disk.build()


@pytest.fixture()
def layer_run(disk_bundle):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    ens = simulate_ensemble(spec, dom, [0.8, 0.0], 1e-3, 200, t_max=0.5, seed=31)
    return ens, evolve_first(ens, spec, dom, [-1.0, 0.0], "boundary")


def test_step_is_capped_by_smallest_delta():
    assert effective_step(1e-3, (0.1, 0.05, 0.025)) == pytest.approx(0.025**2)
    assert effective_step(1e-3, (0.1, 0.05, 0.025), rescale=False) == 1e-3
    assert effective_step(1e-4, (0.2, 0.1, 0.05)) == 1e-4


def test_zero_scheme_perturbation_is_a_shifted_flow(disk_bundle):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    ens = simulate_ensemble(spec, dom, [0.0, 0.2], 1e-2, 100, t_max=1.0, seed=5)
    traj = evolve_first(ens, spec, dom, E1, "zero")

    run = simulate_perturbed(ens, spec, dom, traj, 0.1, 1, use_tilde=False)

    both_alive = np.minimum(ens.exit_index, run.ensemble.exit_index)
    for step in (1, 5, 10):
        rows = both_alive > step
        assert np.allclose(run.ensemble.states[step, rows] - ens.states[step, rows], 0.1 * E1)
    assert np.allclose(run.log_weight, 0.0)
    assert np.allclose(run.time_factor, 1.0)
    assert run.truncation_rate == 0.0
    assert run.as_dict()["start_shift"] == pytest.approx([0.1, 0.0])


def test_perturbation_arguments_are_checked(disk_bundle, layer_run):
    ens, traj = layer_run
    spec, dom = disk_bundle.spec, disk_bundle.dom

    with pytest.raises(InvalidArgumentError):
        simulate_perturbed(ens, spec, dom, traj, 0.01, 0)
    with pytest.raises(InvalidArgumentError):
        simulate_perturbed(ens, spec, dom, traj, -0.01, 1)
    with pytest.raises(InvalidArgumentError):
        guard_limit(traj, 0.01, use_tilde=False, policy="ignore")


def test_guards_raise_or_truncate_large_deltas(disk_bundle, layer_run):
    ens, traj = layer_run

    with pytest.raises(GuardViolationError) as info:
        simulate_perturbed(ens, disk_bundle.spec, disk_bundle.dom, traj, 5.0, 1, use_tilde=False, guard_policy="raise")
    assert 0.0 <= info.value.details["max_delta"] < 5.0

    limit = guard_limit(traj, 5.0, use_tilde=False, policy="truncate")
    assert np.all(limit <= traj.stop_index)
    assert np.any(limit < traj.stop_index)

    safe = admissible_delta(traj, 5.0, use_tilde=False)
    assert safe < 5.0
    if safe > 0.0:
        assert np.array_equal(guard_limit(traj, safe, use_tilde=False, policy="raise"), traj.stop_index)


def test_flow_derivative_errors_report_the_ladder():
    bundle = euler_interval.build()
    ens = simulate_ensemble(bundle.spec, bundle.dom, [1.5], 1e-3, 200, t_max=1.0, seed=7)
    traj = evolve_first(ens, bundle.spec, bundle.dom, [1.0], "zero")

    result = flow_derivative_errors(ens, bundle.spec, bundle.dom, traj, (0.04, 0.02, 0.01), horizon=0.5)

    assert result["order"] == 1
    assert len(result["errors"]) == 3
    assert len(result["ratios"]) == 2
    assert result["truncation_rates"] == [0.0, 0.0, 0.0]
    assert 0.0 < result["window_mean"] <= 0.5
    assert all(err >= 0.0 for err in result["errors"])
    with pytest.raises(InvalidArgumentError):
        flow_derivative_errors(ens, bundle.spec, bundle.dom, traj, (0.04, 0.02, 0.01), order=2)


def test_flow_derivative_errors_flag_an_empty_window(disk_bundle, layer_run):
    ens, traj = layer_run

    result = flow_derivative_errors(ens, disk_bundle.spec, disk_bundle.dom, traj, (0.1, 0.05, 0.025))

    assert result["conclusive"] is False
    assert result["truncation_rates"] == [1.0, 1.0, 1.0]
    assert result["empty_window_fraction"] == 1.0
    assert all(np.isnan(err) for err in result["errors"])
    assert "step 0" in result["note"]


def test_boundary_scheme_flow_quotient_converges_at_first_order(disk_bundle):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    ens = simulate_ensemble(spec, dom, [0.7, 0.0], 5e-4, 300, t_max=0.1, seed=17)
    traj = evolve_first(ens, spec, dom, [0.0, 1.0], "boundary")

    result = flow_derivative_errors(ens, spec, dom, traj, (0.004, 0.002, 0.001))

    assert result["conclusive"] is True
    assert result["errors"][0] > result["errors"][1] > result["errors"][2] > 0.0
    assert all(1.6 <= ratio <= 2.6 for ratio in result["ratios"])


def test_ladder_and_point_are_validated(disk_bundle):
    settings = EstimatorSettings(n_paths=10, h=1e-2, t_max=0.5)

    with pytest.raises(InvalidArgumentError):
        grad_estimate(disk_bundle.spec, disk_bundle.dom, [0.5, 0.0], E1, (0.1, 0.05), settings)
    with pytest.raises(InvalidArgumentError):
        grad_estimate(disk_bundle.spec, disk_bundle.dom, [0.5, 0.0], E1, (0.1, 0.1, 0.05), settings)
    with pytest.raises(InvalidArgumentError):
        hessian_estimate(disk_bundle.spec, disk_bundle.dom, [0.95, 0.0], E1, (0.1, 0.05, 0.025), settings)


def test_gradient_of_harmonic_data_with_plain_flow(disk_bundle):
    settings = EstimatorSettings(h=1e-3, n_paths=2000, seed=11, t_max=2.0, scheme="zero", chunk_paths=1000)

    estimate = grad_estimate(disk_bundle.spec, disk_bundle.dom, [0.5, 0.0], E1, (0.2, 0.1, 0.05), settings)

    assert estimate.order == 1
    assert estimate.quotient.shape == (3, 1)
    assert estimate.weights.sum() == pytest.approx(1.0)
    assert estimate.h == pytest.approx(1e-3)
    assert estimate.truncation_rates == [0.0, 0.0, 0.0]
    assert abs(estimate.extrapolated[0] - 1.0) <= 4.0 * estimate.se[0] + 0.05
    assert estimate.as_dict()["delta"] == [0.2, 0.1, 0.05]

    central = central_difference(
        disk_bundle.spec, disk_bundle.dom, [0.5, 0.0], E1, 0.1, EstimatorSettings(h=1e-3, n_paths=2000, seed=12, t_max=2.0)
    )
    assert abs(central["estimate"][0] - 1.0) <= 4.0 * central["se"][0] + 0.05
    assert consistency_z(estimate, central) >= 0.0


def test_second_difference_of_harmonic_data_with_plain_flow(disk_bundle):
    settings = EstimatorSettings(h=1e-3, n_paths=2000, seed=13, t_max=2.0, scheme="zero")

    estimate = hessian_estimate(disk_bundle.spec, disk_bundle.dom, [0.5, 0.0], E1, (0.2, 0.1, 0.05), settings)

    assert estimate.order == 2
    assert estimate.verdict in {"ok", "inconclusive", "convergence-failure"}
    assert abs(estimate.extrapolated[0] - 2.0) <= 4.0 * estimate.se[0] + 0.1
