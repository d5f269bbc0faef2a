"""Unit disk pieces shared by the built-in disk problems: psi = (1 - |x|^2) / 2 and sigma = sqrt(2) I."""

from __future__ import annotations

import numpy as np

from engine.problem import DomainSpec, InteriorScheme

SQRT2 = float(np.sqrt(2.0))


def psi(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 - np.sum(x**2, axis=1))


def psi_x(x: np.ndarray) -> np.ndarray:
    return -x


def psi_xx(x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(-np.eye(x.shape[1]), (x.shape[0], x.shape[1], x.shape[1])).copy()


def disk_domain(lam: float = 0.5, delta1: float = 0.1) -> DomainSpec:
    return DomainSpec(psi=psi, psi_x=psi_x, psi_xx=psi_xx, lam=lam, delta1=delta1, center=(0.0, 0.0), radius=1.0, psi_sup=0.5)


def sigma(x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(SQRT2 * np.eye(2), (x.shape[0], 2, 2)).copy()


def sigma_dir(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.zeros((x.shape[0], 2, 2))


def sigma_dir2(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.zeros((x.shape[0], 2, 2))


def b(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def b_dir(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def b_dir2(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def flat_interior(M: float = 1.0) -> InteriorScheme:
    """rho = 0, Q = 0 and a constant M."""
    return InteriorScheme(
        rho=lambda x: np.zeros_like(x),
        M=lambda x: np.full(x.shape[0], M),
        Q=lambda x, y: np.zeros((x.shape[0], 2, 2)),
    )
