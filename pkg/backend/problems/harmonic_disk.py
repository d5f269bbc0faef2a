"""Harmonic problem on the unit disk: L = Laplacian, f = 0, g = x1^2 - x2^2, so u = g."""

from __future__ import annotations

import numpy as np

from engine.problem import ExactSolution, ProblemBundle, ProblemSpec, StructuralConstants, TestFunction
from problems import disk

NAME = "harmonic_disk"


def _zeros_k(x: np.ndarray, *_: np.ndarray) -> np.ndarray:
    return np.zeros((x.shape[0], 1))


def g(x: np.ndarray) -> np.ndarray:
    return (x[:, 0] ** 2 - x[:, 1] ** 2)[:, None]


def g_x(x: np.ndarray) -> np.ndarray:
    return np.stack([2.0 * x[:, 0], -2.0 * x[:, 1]], axis=1)[:, None, :]


def g_xx(x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.diag([2.0, -2.0]), (x.shape[0], 1, 2, 2)).copy()


def _scalar(name: str, value, grad, hess) -> TestFunction:
    return TestFunction(name=name, value=value, grad=grad, hess=hess)


def _const_hess(matrix: list[list[float]]):
    mat = np.asarray(matrix, dtype=float)
    return lambda x: np.broadcast_to(mat, (x.shape[0], 2, 2)).copy()


HARMONIC_PANEL = (
    _scalar("1", lambda x: np.ones(x.shape[0]), lambda x: np.zeros_like(x), _const_hess([[0, 0], [0, 0]])),
    _scalar("x1", lambda x: x[:, 0].copy(), lambda x: np.tile([1.0, 0.0], (x.shape[0], 1)), _const_hess([[0, 0], [0, 0]])),
    _scalar("x2", lambda x: x[:, 1].copy(), lambda x: np.tile([0.0, 1.0], (x.shape[0], 1)), _const_hess([[0, 0], [0, 0]])),
    _scalar(
        "x1^2-x2^2",
        lambda x: x[:, 0] ** 2 - x[:, 1] ** 2,
        lambda x: np.stack([2.0 * x[:, 0], -2.0 * x[:, 1]], axis=1),
        _const_hess([[2, 0], [0, -2]]),
    ),
    _scalar(
        "x1*x2",
        lambda x: x[:, 0] * x[:, 1],
        lambda x: np.stack([x[:, 1], x[:, 0]], axis=1),
        _const_hess([[0, 1], [1, 0]]),
    ),
)


def build(lam: float = 0.5, delta1: float = 0.1) -> ProblemBundle:
    # f = 0 is monotone for any mu; the constants are chosen to satisfy (H7)
    constants = StructuralConstants(mu=0.5, L=1.0, L0=0.3, beta=-0.1, vartheta=-0.455, K0=10.0)
    spec = ProblemSpec(
        name=NAME,
        d=2,
        d1=2,
        k=1,
        sigma=disk.sigma,
        sigma_dir=disk.sigma_dir,
        sigma_dir2=disk.sigma_dir2,
        b=disk.b,
        b_dir=disk.b_dir,
        b_dir2=disk.b_dir2,
        f=_zeros_k,
        f_x=lambda x, y, z: np.zeros((x.shape[0], 1, 2)),
        f_y=lambda x, y, z: np.zeros((x.shape[0], 1, 1)),
        f_z=lambda x, y, z: np.zeros((x.shape[0], 1, 1, 2)),
        g=g,
        g_x=g_x,
        g_xx=g_xx,
        constants=constants,
    )
    return ProblemBundle(
        spec=spec,
        dom=disk.disk_domain(lam, delta1),
        interior=disk.flat_interior(1.0),
        exact=ExactSolution(u=g, u_x=g_x, u_xx=g_xx),
        harmonic_panel=HARMONIC_PANEL,
    )
