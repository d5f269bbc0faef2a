from __future__ import annotations

import numpy as np
import pytest

from engine.errors import InvalidArgumentError, NotHarmonicError, OutOfRegionError
from engine.problem import TestFunction
from engine.quasi import (
    check_harmonic,
    evolve_first,
    evolve_second,
    load_trajectory,
    martingale_statistic,
    save_trajectory,
)
from engine.sde import simulate_ensemble
from engine.stats import two_sided_threshold
from problems import euler_interval, harmonic_disk

E1 = np.array([1.0, 0.0])


@pytest.fixture()
def disk_bundle():
    return harmonic_disk.build()


@pytest.fixture()
def layer_ensemble(disk_bundle):
    return simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.8, 0.0], 1e-3, 1500, t_max=0.5, seed=17)


def test_zero_scheme_keeps_constant_flow_derivative(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.3, 0.1], 1e-2, 200, t_max=2.0, seed=2)

    traj = evolve_second(ens, disk_bundle.spec, disk_bundle.dom, evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "zero"))

    assert np.allclose(traj.xi, E1)
    assert np.allclose(traj.xi0_adj, 0.0)
    assert np.allclose(traj.eta, 0.0)
    assert np.allclose(traj.eta0_adj, 0.0)
    assert np.array_equal(traj.stop_index, np.minimum(ens.stop_index, ens.stored_steps))


def test_zero_scheme_reproduces_geometric_flow_derivative():
    bundle = euler_interval.build()
    ens = simulate_ensemble(bundle.spec, bundle.dom, [1.5], 1e-3, 300, t_max=1.0, seed=4)

    traj = evolve_first(ens, bundle.spec, bundle.dom, [1.0], "zero")

    for step in (1, 10, 40):
        alive = traj.stop_index > step
        assert np.allclose(traj.xi[step, alive, 0], ens.states[step, alive, 0] / 1.5)


def test_flat_interior_scheme_damps_xi(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.0], 1e-2, 100, t_max=1.0, seed=6)

    traj = evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "interior", interior=disk_bundle.interior)

    assert np.all(traj.stop_index <= ens.stored_steps)
    for step in (1, 5, 12):
        alive = traj.stop_index > step
        assert np.allclose(traj.xi[step, alive], E1 * (1.0 - 1e-2) ** step)
    assert np.all(traj.region_exit | (traj.stop_index == np.minimum(ens.stop_index, ens.stored_steps)))


def test_switching_scheme_runs_to_the_domain_exit(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.0], 1e-2, 100, t_max=2.0, seed=8)

    traj = evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "switching", interior=disk_bundle.interior)

    assert set(np.unique(traj.mode)) <= {0, 1, 2}
    assert np.all(traj.mode[0] == 2)
    assert not traj.region_exit.any()
    assert set(traj.activation()) == {"localized", "singular", "stiff", "region_exit"}


def test_scheme_start_region_is_enforced(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.0], 1e-2, 10, t_max=0.5, seed=1)

    with pytest.raises(OutOfRegionError):
        evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "boundary")
    with pytest.raises(InvalidArgumentError):
        evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "sideways")
    with pytest.raises(InvalidArgumentError):
        evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "zero", p=3)


def test_boundary_scheme_first_order_identity(disk_bundle, layer_ensemble):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    traj = evolve_first(layer_ensemble, spec, dom, [1.0, 0.5], "boundary")
    checkpoints = (0.02, 0.05, 0.1)
    threshold = two_sided_threshold(len(disk_bundle.harmonic_panel) * len(checkpoints))

    for v in disk_bundle.harmonic_panel:
        report = martingale_statistic(v, spec, dom, layer_ensemble, traj, checkpoints)
        assert report.max_abs_z <= threshold, (v.name, report.z)
        assert len(report.as_rows()) == len(checkpoints)


def test_interior_scheme_identities_up_to_second_order(disk_bundle):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    ens = simulate_ensemble(spec, dom, [0.1, -0.1], 1e-3, 1500, t_max=0.6, seed=29)
    traj = evolve_second(ens, spec, dom, evolve_first(ens, spec, dom, E1, "interior", interior=disk_bundle.interior), interior=disk_bundle.interior)
    checkpoints = (0.02, 0.05, 0.1)
    threshold = two_sided_threshold(2 * len(disk_bundle.harmonic_panel) * len(checkpoints))

    for order in (1, 2):
        for v in disk_bundle.harmonic_panel:
            report = martingale_statistic(v, spec, dom, ens, traj, checkpoints, order=order)
            assert report.max_abs_z <= threshold, (v.name, order, report.z)



def test_second_order_identity_needs_eta(disk_bundle, layer_ensemble):
    traj = evolve_first(layer_ensemble, disk_bundle.spec, disk_bundle.dom, E1, "boundary")
    v = disk_bundle.harmonic_panel[1]

    with pytest.raises(InvalidArgumentError):
        martingale_statistic(v, disk_bundle.spec, disk_bundle.dom, layer_ensemble, traj, (0.05,), order=2)
    with pytest.raises(InvalidArgumentError):
        martingale_statistic(v, disk_bundle.spec, disk_bundle.dom, layer_ensemble, traj, (0.1, 0.05), check=False)


def test_harmonic_check_rejects_subharmonic_functions(disk_bundle):
    square = TestFunction(
        name="|x|^2",
        value=lambda x: np.sum(x**2, axis=1),
        grad=lambda x: 2.0 * x,
        hess=lambda x: np.broadcast_to(2.0 * np.eye(2), (x.shape[0], 2, 2)).copy(),
    )

    with pytest.raises(NotHarmonicError):
        check_harmonic(disk_bundle.spec, disk_bundle.dom, square)
    assert check_harmonic(disk_bundle.spec, disk_bundle.dom, disk_bundle.harmonic_panel[3]) == pytest.approx(0.0)


def test_trajectory_archive(disk_bundle, tmp_path):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.8, 0.0], 1e-2, 30, t_max=0.5, seed=3)
    traj = evolve_second(
        ens, disk_bundle.spec, disk_bundle.dom, evolve_first(ens, disk_bundle.spec, disk_bundle.dom, E1, "boundary", localization=50.0)
    )

    restored = load_trajectory(save_trajectory(traj, tmp_path / "traj.npz"))

    assert restored.scheme == "boundary"
    assert restored.localization == pytest.approx(50.0)
    assert np.array_equal(restored.xi, traj.xi)
    assert np.array_equal(restored.eta0_adj, traj.eta0_adj)


def test_second_order_rejects_foreign_trajectory(disk_bundle):
    spec, dom = disk_bundle.spec, disk_bundle.dom
    ens = simulate_ensemble(spec, dom, [0.0, 0.0], 1e-2, 20, t_max=0.5, seed=1)
    other = simulate_ensemble(spec, dom, [0.0, 0.0], 1e-2, 30, t_max=0.5, seed=1)

    with pytest.raises(InvalidArgumentError):
        evolve_second(other, spec, dom, evolve_first(ens, spec, dom, E1, "zero"))
