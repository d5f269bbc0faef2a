from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from engine.errors import DomainError, InvalidArgumentError, PreconditionError
from engine.estimates import (
    MIN_PANEL,
    _split,
    analytic_derivative,
    bound_rhs,
    bound_shape,
    boundary_approach_panel,
    norm_factor,
    normal_derivative_bound,
    verify_bounds,
)
from engine.problem import NormReport, compute_norms
from problems import euler_interval, harmonic_disk

E1 = np.array([1.0, 0.0])


@pytest.fixture()
def disk_bundle():
    return harmonic_disk.build()


@pytest.fixture()
def disk_norms(disk_bundle):
    return compute_norms(disk_bundle.spec, disk_bundle.dom, 17)


def _norms(**values: float) -> NormReport:
    base = dict(g0=1.0, g1=2.0, g2=3.0, g01=2.5, g11=4.0, f0=0.5, f_lip_x=0.25, f01=0.75, f11=0.1, psi2=1.0, grid_resolution=9, n_points=10)
    base.update(values)
    return NormReport(**base)


def test_bound_shapes_on_the_disk(disk_bundle):
    x = np.array([[0.5, 0.0]])
    inward = np.array([[-1.0, 0.0]])
    psi = 0.375

    assert bound_shape(1, disk_bundle.dom, x, inward)[0] == pytest.approx(1.0 + 0.5 / psi**0.75)
    assert bound_shape(2, disk_bundle.dom, x, inward)[0] == pytest.approx(1.0 + 0.25 / psi**1.75)
    assert bound_shape(1, disk_bundle.dom, x, np.array([[0.0, 1.0]]))[0] == pytest.approx(1.0)
    with pytest.raises(InvalidArgumentError):
        bound_shape(3, disk_bundle.dom, x, inward)
    with pytest.raises(DomainError):
        bound_shape(1, disk_bundle.dom, np.array([[1.0, 0.0]]), inward)


def test_norm_factors():
    norms = _norms()

    assert norm_factor(1, norms) == pytest.approx(2.5 + 0.75)
    assert norm_factor(2, norms) == pytest.approx(4.0 + 0.75 + 0.1 * (1.0 + 4.0 + 0.75**2))
    with pytest.raises(InvalidArgumentError):
        norm_factor(0, norms)


def test_bound_rhs_scales_with_constant(disk_bundle):
    norms = _norms()
    one = bound_rhs(1, disk_bundle.dom, norms, [0.5, 0.0], [-1.0, 0.0])

    assert bound_rhs(1, disk_bundle.dom, norms, [0.5, 0.0], [-1.0, 0.0], N=3.0) == pytest.approx(3.0 * one)


def test_boundary_panel_runs_along_rays(disk_bundle):
    dom = disk_bundle.dom
    panel = boundary_approach_panel(dom, 30)

    assert len(panel) == 30
    first_ray = [x for x, _ in panel[:8]]
    levels = dom.psi(np.array(first_ray))
    assert levels[0] == pytest.approx(dom.delta1, rel=1e-6)
    assert levels[-1] == pytest.approx(0.9 * dom.psi_sup, rel=1e-6)
    assert np.all(np.diff(levels) > 0)
    for x, xi0 in panel:
        assert np.linalg.norm(xi0) == pytest.approx(1.0)
        assert np.allclose(xi0, -x / np.linalg.norm(x))

    for x, xi0 in boundary_approach_panel(dom, 8, tangential=True):
        assert abs(float(dom.directional(x[None, :], xi0[None, :])[0])) < 1e-9
    with pytest.raises(InvalidArgumentError):
        boundary_approach_panel(dom, 0)


def test_interval_panel_uses_both_ends():
    dom = euler_interval.domain()
    panel = boundary_approach_panel(dom, 20)

    xs = np.array([x[0] for x, _ in panel])
    assert np.any(xs < 1.5) and np.any(xs > 1.5)


def test_analytic_derivatives(disk_bundle):
    x = np.array([0.5, 0.0])

    assert analytic_derivative(1, disk_bundle, x, E1) == pytest.approx(1.0)
    assert analytic_derivative(2, disk_bundle, x, E1) == pytest.approx(2.0)
    assert analytic_derivative(2, disk_bundle, x, np.array([0.0, 1.0])) == pytest.approx(2.0)
    with pytest.raises(PreconditionError):
        analytic_derivative(1, dataclasses.replace(disk_bundle, exact=None), x, E1)


def test_split_spreads_calibration_points():
    calib, held = _split(30, 0.5)

    assert calib.size == 15
    assert held.size == 15
    assert calib[0] == 0 and calib[-1] == 29
    assert set(calib).isdisjoint(held)


def test_first_order_bound_with_analytic_derivatives(disk_bundle, disk_norms):
    panel = boundary_approach_panel(disk_bundle.dom, 30)

    report = verify_bounds(1, disk_bundle, panel, disk_norms, source="analytic")

    assert report.verdict == "pass"
    assert report.N_calibrated > 0.0
    assert report.held_out_max <= 1.1 * report.N_calibrated
    assert report.tangential_sup is not None
    rows = report.as_rows()
    assert len(rows) == 30
    assert sum(row["split"] == "calibration" for row in rows) == 15
    assert report.as_dict()["witnesses"] == []


def test_bound_verification_arguments(disk_bundle, disk_norms):
    panel = boundary_approach_panel(disk_bundle.dom, MIN_PANEL)

    with pytest.raises(InvalidArgumentError):
        verify_bounds(1, disk_bundle, panel[: MIN_PANEL - 1], disk_norms, source="analytic")
    with pytest.raises(InvalidArgumentError):
        verify_bounds(1, disk_bundle, panel, disk_norms, source="oracle")
    with pytest.raises(InvalidArgumentError):
        verify_bounds(1, disk_bundle, panel, disk_norms, source="analytic", calibration_fraction=1.0)
    with pytest.raises(InvalidArgumentError):
        verify_bounds(3, disk_bundle, panel, disk_norms, source="analytic")


def test_normal_derivative_report(disk_bundle, disk_norms):
    report = normal_derivative_bound(disk_bundle, [1.0, 0.0], disk_norms, N=1.0, h=1e-3, n_paths=300, seed=4)

    assert report.normal == pytest.approx([-1.0, 0.0])
    assert report.analytic == pytest.approx(2.0)
    assert report.bound == pytest.approx(disk_norms.g2 + disk_norms.f0)
    assert len(report.quotient) == 3
    assert np.isfinite(report.measured)
    assert report.verdict in {"pass", "fail", "inconclusive"}


def test_normal_derivative_arguments(disk_bundle, disk_norms):
    with pytest.raises(InvalidArgumentError):
        normal_derivative_bound(disk_bundle, [0.5, 0.0], disk_norms, n_paths=10)
    with pytest.raises(InvalidArgumentError):
        normal_derivative_bound(disk_bundle, [1.0, 0.0], disk_norms, epsilons=(0.05, 0.1), n_paths=10)
    with pytest.raises(InvalidArgumentError):
        normal_derivative_bound(disk_bundle, [1.0, 0.0], disk_norms, epsilons=(3.0, 1.0), n_paths=10)
