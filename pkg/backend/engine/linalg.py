from __future__ import annotations

import itertools
import logging

import numpy as np
from scipy.linalg import expm

LOGGER = logging.getLogger(__name__)


def antisymmetrize(matrices: np.ndarray) -> np.ndarray:
    """Exactly skew part of a batch of square matrices, shape (..., m, m)."""
    return 0.5 * (matrices - np.swapaxes(matrices, -1, -2))


def skew_from_vector(w: np.ndarray) -> np.ndarray:
    """Batch of 3x3 skew matrices W with W v = w x v."""
    zeros = np.zeros_like(w[:, 0])
    half = np.stack(
        [
            zeros, -w[:, 2], w[:, 1],
            zeros, zeros, -w[:, 0],
            zeros, zeros, zeros,
        ],
        axis=1,
    ).reshape(-1, 3, 3)
    return half - np.swapaxes(half, 1, 2)


def _rodrigues(skew: np.ndarray) -> np.ndarray:
    w = np.stack([skew[:, 2, 1], skew[:, 0, 2], skew[:, 1, 0]], axis=1)
    thetas = np.linalg.norm(w, axis=1)
    safe = np.where(thetas > 0, thetas, 1.0)
    w_norm = skew_from_vector(w / safe[:, None])
    eye = np.broadcast_to(np.eye(3), skew.shape)
    rot = (
        eye
        + np.sin(thetas)[:, None, None] * w_norm
        + (1.0 - np.cos(thetas))[:, None, None] * (w_norm @ w_norm)
    )
    return np.where((thetas > 0)[:, None, None], rot, eye)


def skew_expm(skew: np.ndarray) -> np.ndarray:
    """Matrix exponential of a batch of skew-symmetric matrices, shape (n, m, m).

    m = 1 is the identity, m = 2 a plane rotation, m = 3 Rodrigues' formula;
    larger m falls back to scaling-and-squaring.
    """
    skew = np.asarray(skew, dtype=float)
    n, m, _ = skew.shape
    if m == 1:
        return np.ones((n, 1, 1))
    if m == 2:
        angle = skew[:, 1, 0]
        c, s = np.cos(angle), np.sin(angle)
        return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=1)
    if m == 3:
        return _rodrigues(skew)
    return expm(skew)


def orthogonality_defect(rotations: np.ndarray) -> float:
    if rotations.size == 0:
        return 0.0
    m = rotations.shape[-1]
    gram = np.swapaxes(rotations, -1, -2) @ rotations
    return float(np.max(np.abs(gram - np.eye(m))))


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree`` (constant column first)."""
    n, d = x.shape
    columns = [np.ones(n)]
    for order in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), order):
            columns.append(np.prod(x[:, combo], axis=1))
    return np.column_stack(columns)


def least_squares(basis: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, int]:
    """Minimum-norm least-squares coefficients and numerical rank of ``basis``."""
    coef, _, rank, _ = np.linalg.lstsq(basis, targets, rcond=None)
    return coef, int(rank)
