from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

from engine.barriers import (
    BarrierSpec,
    calibrate_k1,
    calibrate_lambda,
    eval_barrier,
    moment_integral_samples,
    moment_integral_test,
    ordering_check,
    phi_bounds_check,
    pilot_moment_constant,
    supermartingale_test,
)
from engine.errors import DomainError, InvalidArgumentError
from engine.quasi import evolve_first
from engine.sde import simulate_ensemble
from engine.stats import one_sided_threshold
from problems import harmonic_disk

E1 = np.array([1.0, 0.0])


@pytest.fixture()
def disk_bundle():
    return harmonic_disk.build()


@pytest.fixture()
def interior_run(disk_bundle):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    ens = simulate_ensemble(spec, dom, [0.0, 0.0], 1e-3, 400, t_max=1.0, seed=12)
    traj = evolve_first(ens, spec, dom, E1, "interior", interior=disk_bundle.interior, localization=50.0)
    return ens, traj


def test_named_barriers_fix_their_order():
    b3 = BarrierSpec("B3", 0.3, p=1)

    assert b3.p == 2
    assert b3.degree == 8
    assert b3.family == "odd"
    assert b3.scheme == "boundary"
    assert BarrierSpec("B2", 0.3).scheme == "interior"
    assert BarrierSpec("odd", 0.3, p=2).label == "B3"
    assert BarrierSpec("even", 0.3, p=1).label == "B2"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "B5", "lam": 0.3},
        {"kind": "B1", "lam": 1.5},
        {"kind": "B1", "lam": 0.3, "K1": 0.5},
        {"kind": "odd", "lam": 0.3, "p": 0},
    ],
)
def test_barrier_spec_rejects_bad_parameters(kwargs):
    with pytest.raises(InvalidArgumentError):
        BarrierSpec(**kwargs)


def test_even_barrier_ignores_position(disk_bundle):
    values, phis = eval_barrier(BarrierSpec("B2", 0.5), disk_bundle.dom, None, np.array([[2.0, 0.0]]))

    assert values[0] == pytest.approx(0.5**0.75 * 16.0)
    assert np.isnan(phis[0])


def test_odd_barrier_value(disk_bundle):
    lam = 0.3
    x = np.array([[0.8, 0.0]])
    values, phis = eval_barrier(BarrierSpec("B1", lam, K1=2.0), disk_bundle.dom, x, E1[None, :])

    psi = 0.18
    phi = lam**2 + psi - psi**2 / (4.0 * lam)
    expected = lam + np.sqrt(psi) + psi + 2.0 * phi**3.5 * 0.8**4 / psi**3
    assert phis[0] == pytest.approx(phi)
    assert values[0] == pytest.approx(expected)


def test_odd_barrier_needs_points_inside(disk_bundle):
    with pytest.raises(DomainError):
        eval_barrier(BarrierSpec("B1", 0.3), disk_bundle.dom, np.array([[1.5, 0.0]]), E1[None, :])
    with pytest.raises(InvalidArgumentError):
        eval_barrier(BarrierSpec("B1", 0.3), disk_bundle.dom, None, E1[None, :])


def test_phi_bounds_hold_in_the_layer(disk_bundle):
    points = disk_bundle.dom.grid(21)
    report = phi_bounds_check(disk_bundle.dom, 0.3, points)

    assert report["passed"]
    assert report["n_points"] > 0
    assert phi_bounds_check(disk_bundle.dom, 0.3, np.zeros((1, 2)))["n_points"] == 0


def test_lambda_calibration_reaches_ordering(disk_bundle):
    calibration = calibrate_lambda(disk_bundle.dom, grid_resolution=17, n_level=24)

    assert calibration.passed
    assert calibration.lam < 0.3
    assert calibration.halvings == len(calibration.history) - 1
    assert calibration.ordering.margin_upper >= 0.0
    assert calibration.ordering.margin_lower >= 0.0
    assert calibration.as_dict()["lambda"] == calibration.lam


def test_ordering_needs_matching_families(disk_bundle):
    odd = BarrierSpec("B1", 0.3)
    with pytest.raises(InvalidArgumentError):
        ordering_check(disk_bundle.dom, odd, odd, np.zeros((1, 2)), np.zeros((1, 2)), E1[None, :])


def test_barrier_scheme_pairing_is_enforced(disk_bundle, interior_run):
    ens, traj = interior_run

    with pytest.raises(InvalidArgumentError):
        supermartingale_test(BarrierSpec("B1", 0.5), disk_bundle.dom, ens, traj, (0.05,), beta=-0.1)


def test_even_barrier_is_a_supermartingale_under_flat_interior_scheme(disk_bundle, interior_run):
    ens, traj = interior_run
    bspec = BarrierSpec("B2", disk_bundle.dom.lam)
    checkpoints = (0.05, 0.1, 0.2)

    report = supermartingale_test(bspec, disk_bundle.dom, ens, traj, checkpoints, beta=disk_bundle.spec.constants.beta)

    assert report.passed
    assert report.threshold == pytest.approx(one_sided_threshold(3))
    assert report.start_value == pytest.approx(disk_bundle.dom.lam**0.75)
    assert all(m <= report.start_value + 1e-12 for m in report.means)
    assert report.as_dict()["barrier"] == "B2"


def test_moment_integral_against_pilot_constant(disk_bundle, interior_run):
    ens, traj = interior_run
    bspec = BarrierSpec("B2", disk_bundle.dom.lam)
    samples = moment_integral_samples(bspec, disk_bundle.dom, ens, traj, -0.1)

    assert np.all(samples >= 0.0)
    assert np.all(samples <= traj.stop_time + ens.h)

    start = float(disk_bundle.dom.lam**0.75)
    constant = pilot_moment_constant(samples, start)
    result = moment_integral_test(samples, start, constant)
    assert result["passed"]
    assert result["bound"] == pytest.approx(constant * start)
    assert pilot_moment_constant(np.ones(4), 0.0) == float("inf")


def _fake_report(passed: bool) -> SimpleNamespace:
    return SimpleNamespace(passed=passed, verdict="pass" if passed else "fail", z=[0.5], sqrt_z=[0.1])


def test_k1_calibration_stops_at_first_pass():
    calibration = calibrate_k1(lambda k1: _fake_report(k1 >= 4.0))

    assert calibration.passed
    assert calibration.K1 == 4.0
    assert [entry["K1"] for entry in calibration.history] == [1.0, 2.0, 4.0]


def test_k1_calibration_gives_up():
    calibration = calibrate_k1(lambda k1: _fake_report(False), max_steps=3)

    assert not calibration.passed
    assert calibration.K1 == 8.0
    assert len(calibration.history) == 4
