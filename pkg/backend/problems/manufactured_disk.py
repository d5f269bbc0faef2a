"""Manufactured problems on the unit disk with u* = sin(x1) sinh(x2) (1 + |x|^2 / 4).

``build`` uses the x-only source f = -L u*; ``build_monotone`` uses the
monotone driver f(x, y, z) = -mu y + c(x) with c = mu u* - L u*.
"""

from __future__ import annotations

import numpy as np

from engine.problem import ExactSolution, ProblemBundle, ProblemSpec, StructuralConstants
from problems import disk

NAME = "manufactured_disk"
MONOTONE_NAME = "tp3_monotone"
MONOTONE_MU = 0.8


def _parts(x: np.ndarray) -> dict[str, np.ndarray]:
    x1, x2 = x[:, 0], x[:, 1]
    s1, c1 = np.sin(x1), np.cos(x1)
    sh, ch = np.sinh(x2), np.cosh(x2)
    return {"x1": x1, "x2": x2, "s1": s1, "c1": c1, "sh": sh, "ch": ch, "w": s1 * sh, "T": 1.0 + 0.25 * (x1**2 + x2**2)}


def u_star(x: np.ndarray) -> np.ndarray:
    p = _parts(x)
    return (p["w"] * p["T"])[:, None]


def u_star_x(x: np.ndarray) -> np.ndarray:
    p = _parts(x)
    w_grad = np.stack([p["c1"] * p["sh"], p["s1"] * p["ch"]], axis=1)
    grad = w_grad * p["T"][:, None] + 0.5 * p["w"][:, None] * x
    return grad[:, None, :]


def u_star_xx(x: np.ndarray) -> np.ndarray:
    p = _parts(x)
    n = x.shape[0]
    w_grad = np.stack([p["c1"] * p["sh"], p["s1"] * p["ch"]], axis=1)
    w_hess = np.empty((n, 2, 2))
    w_hess[:, 0, 0] = -p["w"]
    w_hess[:, 1, 1] = p["w"]
    w_hess[:, 0, 1] = w_hess[:, 1, 0] = p["c1"] * p["ch"]
    cross = 0.5 * (w_grad[:, :, None] * x[:, None, :] + x[:, :, None] * w_grad[:, None, :])
    hess = w_hess * p["T"][:, None, None] + cross + 0.5 * p["w"][:, None, None] * np.eye(2)
    return hess[:, None, :, :]


def laplacian(x: np.ndarray) -> np.ndarray:
    """L u* = Laplacian of u*, shape (n,)."""
    p = _parts(x)
    return p["x1"] * p["c1"] * p["sh"] + p["x2"] * p["s1"] * p["ch"] + p["w"]


def laplacian_x(x: np.ndarray) -> np.ndarray:
    p = _parts(x)
    d1 = 2.0 * p["c1"] * p["sh"] - p["x1"] * p["s1"] * p["sh"] + p["x2"] * p["c1"] * p["ch"]
    d2 = p["x1"] * p["c1"] * p["ch"] + 2.0 * p["s1"] * p["ch"] + p["x2"] * p["s1"] * p["sh"]
    return np.stack([d1, d2], axis=1)


def _spec(name: str, f, f_x, f_y, constants: StructuralConstants) -> ProblemSpec:
    return ProblemSpec(
        name=name,
        d=2,
        d1=2,
        k=1,
        sigma=disk.sigma,
        sigma_dir=disk.sigma_dir,
        sigma_dir2=disk.sigma_dir2,
        b=disk.b,
        b_dir=disk.b_dir,
        b_dir2=disk.b_dir2,
        f=f,
        f_x=f_x,
        f_y=f_y,
        f_z=lambda x, y, z: np.zeros((x.shape[0], 1, 1, 2)),
        g=u_star,
        g_x=u_star_x,
        g_xx=u_star_xx,
        constants=constants,
    )


def build(lam: float = 0.5, delta1: float = 0.1) -> ProblemBundle:
    spec = _spec(
        NAME,
        f=lambda x, y, z: -laplacian(x)[:, None],
        f_x=lambda x, y, z: -laplacian_x(x)[:, None, :],
        f_y=lambda x, y, z: np.zeros((x.shape[0], 1, 1)),
        constants=StructuralConstants(mu=0.5, L=1.0, L0=0.3, beta=-0.1, vartheta=-0.455, K0=10.0),
    )
    exact = ExactSolution(u=u_star, u_x=u_star_x, u_xx=u_star_xx)
    return ProblemBundle(spec=spec, dom=disk.disk_domain(lam, delta1), interior=disk.flat_interior(1.0), exact=exact)


def build_monotone(lam: float = 0.5, delta1: float = 0.1, mu: float = MONOTONE_MU) -> ProblemBundle:
    L0 = 0.3

    def source(x: np.ndarray) -> np.ndarray:
        return mu * u_star(x)[:, 0] - laplacian(x)

    spec = _spec(
        MONOTONE_NAME,
        f=lambda x, y, z: -mu * y + source(x)[:, None],
        f_x=lambda x, y, z: (mu * u_star_x(x)[:, 0, :] - laplacian_x(x))[:, None, :],
        f_y=lambda x, y, z: np.full((x.shape[0], 1, 1), -mu),
        constants=StructuralConstants(mu=mu, L=mu + 0.2, L0=L0, beta=-0.1, vartheta=(-2.0 * mu + L0**2) / 2.0, K0=10.0),
    )
    exact = ExactSolution(u=u_star, u_x=u_star_x, u_xx=u_star_xx)
    return ProblemBundle(spec=spec, dom=disk.disk_domain(lam, delta1), interior=disk.flat_interior(1.0), exact=exact)
