from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

BASE_Z = 3.0


@dataclass(frozen=True)
class SampleSummary:
    mean: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: int

    def as_dict(self) -> dict[str, object]:
        return {
            "mean": self.mean.tolist(),
            "se": self.se.tolist(),
            "ci95": [self.ci_low.tolist(), self.ci_high.tolist()],
            "n": self.n,
        }


def summarize(samples: np.ndarray) -> SampleSummary:
    """Mean, standard error and normal 95% interval over axis 0."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    if n > 1:
        se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        se = np.zeros_like(mean)
    half = stats.norm.ppf(0.975) * se
    return SampleSummary(mean=np.atleast_1d(mean), se=np.atleast_1d(se), ci_low=np.atleast_1d(mean - half), ci_high=np.atleast_1d(mean + half), n=n)


def z_scores(mean: np.ndarray, se: np.ndarray, null: np.ndarray | float = 0.0) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    se = np.asarray(se, dtype=float)
    diff = mean - null
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
    return z


def one_sided_threshold(n_tests: int, base_z: float = BASE_Z) -> float:
    """z threshold keeping the family-wise level of a single one-sided z > base_z test."""
    alpha = stats.norm.sf(base_z)
    return float(stats.norm.isf(alpha / max(1, n_tests)))


def two_sided_threshold(n_tests: int, base_z: float = BASE_Z) -> float:
    alpha = 2.0 * stats.norm.sf(base_z)
    return float(stats.norm.isf(alpha / (2.0 * max(1, n_tests))))


def richardson_extrapolate(
    base_values: Sequence[np.ndarray | float],
    p: int,
    r: float = 2.0,
) -> np.ndarray | float:
    """Richardson extrapolation on approximations at step sizes shrinking by ``r``."""
    n = len(base_values)
    if n < 2:
        raise ValueError("richardson_extrapolate requires at least two base values.")

    vals = [np.asarray(v, dtype=float) for v in base_values]

    for j in range(1, n):
        factor = r ** (p * j)
        for k in range(n - 1, j - 1, -1):
            vals[k] = (factor * vals[k] - vals[k - 1]) / (factor - 1.0)

    result = vals[-1]
    return float(result) if result.ndim == 0 else result


def extrapolation_weights(steps: Sequence[float], p: int = 1) -> np.ndarray:
    """Linear weights w with sum_j w_j q(steps_j) the zero-step extrapolate.

    Uses Richardson's table when the ladder ratio is constant, otherwise a
    least-squares fit of q = c0 + c1 s^p + ... over the ladder.
    """
    steps = np.asarray(steps, dtype=float)
    n = steps.size
    ratios = steps[:-1] / steps[1:]
    if n >= 2 and np.allclose(ratios, ratios[0], rtol=1e-9):
        eye = np.eye(n)
        return np.asarray(richardson_extrapolate([eye[j] for j in range(n)], p=p, r=float(ratios[0])))
    degree = min(n - 1, 2)
    vander = np.column_stack([steps ** (p * j) for j in range(degree + 1)])
    return np.linalg.pinv(vander)[0]
