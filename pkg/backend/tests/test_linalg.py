from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import expm

from engine.linalg import (
    antisymmetrize,
    least_squares,
    orthogonality_defect,
    polynomial_features,
    skew_expm,
)


@pytest.mark.parametrize("m", [2, 3, 4])
def test_skew_expm_matches_scipy(m):
    gen = np.random.default_rng(m)
    skew = antisymmetrize(gen.normal(size=(5, m, m)))

    rotations = skew_expm(skew)

    for k in range(5):
        assert np.allclose(rotations[k], expm(skew[k]), atol=1e-10)
    assert orthogonality_defect(rotations) < 1e-10


def test_skew_expm_of_zero_is_identity():
    assert np.allclose(skew_expm(np.zeros((3, 3, 3))), np.eye(3))
    assert np.allclose(skew_expm(np.zeros((2, 1, 1))), 1.0)


def test_orthogonality_defect_detects_scaling():
    assert orthogonality_defect(2.0 * np.eye(2)[None]) == pytest.approx(3.0)
    assert orthogonality_defect(np.zeros((0, 2, 2))) == 0.0


def test_polynomial_features_counts_monomials():
    x = np.array([[2.0, 3.0]])
    features = polynomial_features(x, 2)

    assert features.shape == (1, 6)
    assert np.allclose(features[0], [1.0, 2.0, 3.0, 4.0, 6.0, 9.0])


def test_least_squares_recovers_exact_fit():
    x = np.linspace(-1.0, 1.0, 25)[:, None]
    basis = polynomial_features(x, 2)
    coef, rank = least_squares(basis, 1.0 - 2.0 * x[:, 0] + 0.5 * x[:, 0] ** 2)

    assert rank == 3
    assert np.allclose(coef, [1.0, -2.0, 0.5])
