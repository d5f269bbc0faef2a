from __future__ import annotations

import numpy as np
import pytest

from engine.rng import IncrementStream, derive_seed
from engine.stats import (
    extrapolation_weights,
    one_sided_threshold,
    richardson_extrapolate,
    summarize,
    two_sided_threshold,
    z_scores,
)


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(7, "pilot") == derive_seed(7, "pilot")
    assert derive_seed(7, "pilot") != derive_seed(7, "confirm")
    assert derive_seed(7, "pilot") != derive_seed(8, "pilot")


def test_increments_do_not_depend_on_chunking():
    whole = IncrementStream(11, 100, 2, 0.01, block=16)
    left = whole.subset(0, 37)
    right = whole.subset(37, 63)

    for step in (0, 5):
        stitched = np.concatenate([left.increments(step), right.increments(step)], axis=0)
        assert np.array_equal(stitched, whole.increments(step))


def test_coarsened_increments_sum_the_fine_ones():
    fine = IncrementStream(3, 20, 1, 0.001, block=8)
    coarse = fine.coarsen(4)

    assert coarse.h == pytest.approx(0.004)
    expected = sum(fine.increments(4 + k) for k in range(4))
    assert np.allclose(coarse.increments(1), expected)


def test_stream_rejects_bad_arguments():
    with pytest.raises(ValueError):
        IncrementStream(0, 0, 1, 0.1)
    with pytest.raises(ValueError):
        IncrementStream(0, 10, 1, 0.0)


def test_summarize_reports_mean_and_standard_error():
    summary = summarize(np.array([1.0, 2.0, 3.0, 4.0]))

    assert summary.n == 4
    assert summary.mean[0] == pytest.approx(2.5)
    assert summary.se[0] == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
    assert summary.ci_low[0] < 2.5 < summary.ci_high[0]


def test_z_scores_handle_zero_standard_error():
    z = z_scores(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.0, 0.5]))

    assert z[0] == 0.0
    assert np.isinf(z[1])
    assert z[2] == pytest.approx(4.0)


def test_thresholds_match_base_level_for_a_single_test():
    assert one_sided_threshold(1) == pytest.approx(3.0)
    assert two_sided_threshold(1) == pytest.approx(3.0)
    assert one_sided_threshold(50) > 3.0
    assert two_sided_threshold(50) > two_sided_threshold(5)


def test_richardson_is_exact_on_quadratics():
    def q(s):
        return 3.0 + 2.0 * s + 5.0 * s**2

    steps = [0.4, 0.2, 0.1]
    assert richardson_extrapolate([q(s) for s in steps], p=1) == pytest.approx(3.0)

    weights = extrapolation_weights(steps, p=1)
    assert weights.sum() == pytest.approx(1.0)
    assert weights @ np.array([q(s) for s in steps]) == pytest.approx(3.0)


def test_richardson_even_order_cancels_squared_terms():
    def q(s):
        return -1.0 + 4.0 * s**2 + 0.5 * s**4

    assert richardson_extrapolate([q(s) for s in (0.2, 0.1, 0.05)], p=2) == pytest.approx(-1.0)


def test_richardson_needs_two_values():
    with pytest.raises(ValueError):
        richardson_extrapolate([1.0], p=1)
