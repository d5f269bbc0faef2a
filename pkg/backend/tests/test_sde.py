from __future__ import annotations

import numpy as np
import pytest

from engine.errors import InvalidArgumentError
from engine.sde import (
    chunk_bounds,
    exit_statistics,
    load_ensemble,
    map_chunks,
    save_ensemble,
    simulate_ensemble,
    strong_order_check,
)
from problems import euler_interval, harmonic_disk


@pytest.fixture()
def disk_bundle():
    return harmonic_disk.build()


def test_mean_exit_time_from_disk_center(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.0], 1e-3, 2000, t_max=3.0, seed=1)
    stats = exit_statistics(ens, disk_bundle.dom)

    assert stats.capped_fraction == 0.0
    assert abs(stats.mean - 0.25) <= 0.03 + 3.0 * stats.se
    assert stats.psi_x0 == pytest.approx(0.5)
    assert stats.verdict == "pass"
    assert stats.as_dict()["bound_second"] == pytest.approx(0.5)


def test_stopped_paths_sit_on_the_boundary(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.5, 0.0], 2e-3, 300, t_max=3.0, seed=4)

    exited = ~ens.capped
    radii = np.linalg.norm(ens.stopped_states()[exited], axis=1)
    assert np.all(radii >= 1.0 - 1e-6)
    assert np.all(np.linalg.norm(ens.overshoot[exited], axis=1) >= 1.0)
    assert np.all(ens.refined_time[exited] <= ens.exit_time[exited] + 1e-12)


def test_short_horizon_caps_paths(disk_bundle):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.0], 1e-2, 200, t_max=0.05, seed=2)

    assert ens.capped.any()
    stats = exit_statistics(ens, disk_bundle.dom)
    assert stats.capped_fraction == pytest.approx(float(ens.capped.mean()))


def test_chunked_simulation_matches_single_run(disk_bundle):
    whole = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.2, -0.1], 1e-2, 100, t_max=1.0, seed=9, rng_block=16)

    for workers in (1, 2):
        parts = map_chunks(
            lambda e: e,
            disk_bundle.spec,
            disk_bundle.dom,
            [0.2, -0.1],
            1e-2,
            100,
            9,
            t_max=1.0,
            chunk_paths=37,
            workers=workers,
            rng_block=16,
        )
        assert [p.n_paths for p in parts] == [37, 37, 26]
        assert np.array_equal(np.concatenate([p.exit_index for p in parts]), whole.exit_index)
        stopped = np.concatenate([p.stopped_states() for p in parts])
        assert np.allclose(stopped, whole.stopped_states(), atol=1e-12)

    pooled = exit_statistics(parts, disk_bundle.dom)
    assert pooled.mean == pytest.approx(exit_statistics(whole, disk_bundle.dom).mean)


def test_chunk_bounds_cover_all_paths():
    assert chunk_bounds(10, 4) == [(0, 4), (4, 4), (8, 2)]


def test_start_point_must_lie_inside(disk_bundle):
    with pytest.raises(InvalidArgumentError):
        simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [1.0, 0.0], 1e-2, 10)
    with pytest.raises(InvalidArgumentError):
        simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.0], 0.0, 10)


def test_ensemble_archive_keeps_replay_header(disk_bundle, tmp_path):
    ens = simulate_ensemble(disk_bundle.spec, disk_bundle.dom, [0.0, 0.3], 1e-2, 20, t_max=0.5, seed=123, path_offset=40, rng_block=32)

    restored = load_ensemble(save_ensemble(ens, tmp_path / "runs" / "paths.npz"))

    assert restored.seed == 123
    assert restored.path_offset == 40
    assert restored.rng_block == 32
    assert restored.h == pytest.approx(1e-2)
    assert np.array_equal(restored.states, ens.states)
    assert np.array_equal(restored.stream().increments(3), ens.stream().increments(3))


def test_euler_strong_order_on_geometric_dynamics():
    bundle = euler_interval.build()

    report = strong_order_check(
        bundle.spec,
        [1.5],
        euler_interval.exact_flow,
        t_fixed=0.16,
        h=1e-3,
        n_paths=500,
        seed=3,
    )

    assert len(report.errors) == 3
    assert report.errors[0] < report.errors[-1]
    assert all(order > 0.3 for order in report.orders)


def test_strong_order_needs_nested_grids():
    bundle = euler_interval.build()
    with pytest.raises(InvalidArgumentError):
        strong_order_check(bundle.spec, [1.5], euler_interval.exact_flow, t_fixed=0.1, h=1e-3, n_paths=10, seed=0)
