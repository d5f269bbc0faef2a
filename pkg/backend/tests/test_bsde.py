from __future__ import annotations

import numpy as np
import pytest

from engine.bsde import (
    apriori_ratio,
    default_basis,
    estimate_u_driver_free,
    markov_consistency,
    mbeta_norm,
    pool_solutions,
    solve_picard,
)
from engine.errors import InvalidArgumentError, PreconditionError
from engine.sde import map_chunks, simulate_ensemble
from problems import euler_interval, harmonic_disk, manufactured_disk


@pytest.fixture()
def interval_bundle():
    return euler_interval.build()


@pytest.fixture()
def interval_ensemble(interval_bundle):
    return simulate_ensemble(interval_bundle.spec, interval_bundle.dom, [1.5], 2e-3, 3000, t_max=3.0, seed=21)


def test_driver_free_recovers_harmonic_data():
    bundle = harmonic_disk.build()
    ens = simulate_ensemble(bundle.spec, bundle.dom, [0.5, 0.0], 2e-3, 4000, t_max=3.0, seed=5)

    solution = estimate_u_driver_free(ens, bundle.spec)

    assert solution.method == "driver-free"
    assert abs(solution.Y0[0] - 0.25) <= 3.0 * solution.se[0] + 0.02
    assert solution.ci_low[0] < solution.Y0[0] < solution.ci_high[0]


def test_driver_free_adds_the_source_term():
    bundle = manufactured_disk.build()
    x0 = np.array([[0.3, 0.2]])
    ens = simulate_ensemble(bundle.spec, bundle.dom, x0[0], 2e-3, 3000, t_max=3.0, seed=8)

    solution = estimate_u_driver_free(ens, bundle.spec)

    exact = float(manufactured_disk.u_star(x0)[0, 0])
    assert abs(solution.Y0[0] - exact) <= 3.0 * solution.se[0] + 0.02


def test_driver_free_refuses_solution_dependent_driver(interval_bundle):
    ens = simulate_ensemble(interval_bundle.spec, interval_bundle.dom, [1.5], 1e-2, 50, t_max=0.5, seed=0)

    with pytest.raises(PreconditionError):
        estimate_u_driver_free(ens, interval_bundle.spec)


def test_pooled_chunks_match_single_estimate():
    bundle = harmonic_disk.build()
    whole = estimate_u_driver_free(
        simulate_ensemble(bundle.spec, bundle.dom, [0.1, 0.4], 1e-2, 1000, t_max=2.0, seed=6), bundle.spec
    )

    parts = map_chunks(
        lambda ens: estimate_u_driver_free(ens, bundle.spec),
        bundle.spec,
        bundle.dom,
        [0.1, 0.4],
        1e-2,
        1000,
        6,
        t_max=2.0,
        chunk_paths=300,
    )
    pooled = pool_solutions(parts)

    assert pooled.n_paths == 1000
    assert np.allclose(pooled.Y0, whole.Y0, atol=1e-12)
    assert np.allclose(pooled.se, whole.se, atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        pool_solutions([])


def test_picard_matches_closed_form_on_interval(interval_bundle, interval_ensemble):
    basis = default_basis(interval_bundle.spec, interval_bundle.dom)

    solution = solve_picard(interval_ensemble, interval_bundle.spec, basis, max_iter=30, tol=1e-6)

    exact = float(interval_bundle.exact.u(np.array([[1.5]]))[0, 0])
    assert solution.converged
    assert solution.method == "picard"
    assert abs(solution.Y0[0] - exact) <= 3.0 * solution.se[0] + 0.05
    assert solution.residual_history[-1] < 1e-6


def test_picard_diagnostics(interval_bundle, interval_ensemble):
    basis = default_basis(interval_bundle.spec, interval_bundle.dom)
    solution = solve_picard(interval_ensemble, interval_bundle.spec, basis, max_iter=30, tol=1e-6)

    norms = mbeta_norm(solution, interval_ensemble, interval_bundle.spec.constants.beta)
    assert norms.y > 0.0
    assert np.isfinite(norms.z)

    ratio = apriori_ratio(solution, interval_ensemble, g0=2.0, f0=0.0)
    assert ratio["scale"] == pytest.approx(4.0)
    assert 0.0 < ratio["ratio"] < np.inf

    markov = markov_consistency(solution, interval_ensemble, basis, (5, 20))
    assert markov["slices"] == [5, 20]
    with pytest.raises(InvalidArgumentError):
        markov_consistency(solution, interval_ensemble, basis, (0, 20))


def test_driver_free_solution_has_no_processes():
    bundle = harmonic_disk.build()
    ens = simulate_ensemble(bundle.spec, bundle.dom, [0.0, 0.0], 1e-2, 50, t_max=1.0, seed=1)
    solution = estimate_u_driver_free(ens, bundle.spec)

    assert np.isnan(mbeta_norm(solution, ens, -0.1).y)
    with pytest.raises(PreconditionError):
        apriori_ratio(solution, ens, 1.0, 0.0)
    with pytest.raises(PreconditionError):
        markov_consistency(solution, ens, default_basis(bundle.spec, bundle.dom), (1, 2))
