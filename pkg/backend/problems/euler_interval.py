"""Degenerate 1-d problem on D = (1, 2): sigma = x, b = b1 x, f = -c y, g = x.

The solution solves x^2 u''/2 + b1 x u' - c u = 0, so u = A x^a1 + B x^a2 with
a the roots of a^2/2 + (b1 - 1/2) a - c = 0 and (A, B) fitted to u(1) = 1, u(2) = 2.
"""

from __future__ import annotations

import numpy as np

from engine.problem import DomainSpec, ExactSolution, InteriorScheme, ProblemBundle, ProblemSpec, StructuralConstants

NAME = "euler_interval"
B1 = 0.1
C = 2.0
KAPPA = 2.0


def exponents(b1: float = B1, c: float = C) -> tuple[float, float]:
    shift = b1 - 0.5
    root = float(np.sqrt(shift**2 + 2.0 * c))
    return -shift + root, -shift - root


def coefficients(b1: float = B1, c: float = C) -> tuple[float, float]:
    a1, a2 = exponents(b1, c)
    system = np.array([[1.0, 1.0], [2.0**a1, 2.0**a2]])
    A, B = np.linalg.solve(system, np.array([1.0, 2.0]))
    return float(A), float(B)


def exact_solution(b1: float = B1, c: float = C) -> ExactSolution:
    a1, a2 = exponents(b1, c)
    A, B = coefficients(b1, c)

    def u(x: np.ndarray) -> np.ndarray:
        return A * x**a1 + B * x**a2

    def u_x(x: np.ndarray) -> np.ndarray:
        return (A * a1 * x ** (a1 - 1.0) + B * a2 * x ** (a2 - 1.0))[:, :, None]

    def u_xx(x: np.ndarray) -> np.ndarray:
        second = A * a1 * (a1 - 1.0) * x ** (a1 - 2.0) + B * a2 * (a2 - 1.0) * x ** (a2 - 2.0)
        return second[:, :, None, None]

    return ExactSolution(u=u, u_x=u_x, u_xx=u_xx)


def exact_flow(x0: np.ndarray, t: float, w_t: np.ndarray, b1: float = B1) -> np.ndarray:
    """Geometric dynamics: X_t = x0 exp((b1 - 1/2) t + W_t)."""
    return x0 * np.exp((b1 - 0.5) * t + w_t)


def domain(lam: float = 0.5, delta1: float = 0.1) -> DomainSpec:
    return DomainSpec(
        psi=lambda x: KAPPA * (x[:, 0] - 1.0) * (2.0 - x[:, 0]),
        psi_x=lambda x: KAPPA * (3.0 - 2.0 * x),
        psi_xx=lambda x: np.full((x.shape[0], 1, 1), -2.0 * KAPPA),
        lam=lam,
        delta1=delta1,
        center=(1.5,),
        radius=0.5,
        psi_sup=0.25 * KAPPA,
    )


def build(lam: float = 0.5, delta1: float = 0.1, b1: float = B1, c: float = C) -> ProblemBundle:
    # mu = c for f = -c y; L0 > 0 is nominal since f does not depend on z
    L0 = 0.1
    constants = StructuralConstants(mu=c, L=c + 0.5, L0=L0, beta=-0.5, vartheta=(-2.0 * c + L0**2) / 2.0, K0=20.0)
    spec = ProblemSpec(
        name=NAME,
        d=1,
        d1=1,
        k=1,
        sigma=lambda x: x[:, :, None].copy(),
        sigma_dir=lambda x, y: y[:, :, None].copy(),
        sigma_dir2=lambda x, y, z: np.zeros((x.shape[0], 1, 1)),
        b=lambda x: b1 * x,
        b_dir=lambda x, y: b1 * y,
        b_dir2=lambda x, y, z: np.zeros_like(x),
        f=lambda x, y, z: -c * y,
        f_x=lambda x, y, z: np.zeros((x.shape[0], 1, 1)),
        f_y=lambda x, y, z: np.full((x.shape[0], 1, 1), -c),
        f_z=lambda x, y, z: np.zeros((x.shape[0], 1, 1, 1)),
        g=lambda x: x.copy(),
        g_x=lambda x: np.ones((x.shape[0], 1, 1)),
        g_xx=lambda x: np.zeros((x.shape[0], 1, 1, 1)),
        constants=constants,
    )
    # M = 6 keeps the p = 1 moment inequality with beta = -0.5 on [1, 2]
    interior = InteriorScheme(
        rho=lambda x: np.zeros_like(x),
        M=lambda x: np.full(x.shape[0], 6.0),
        Q=lambda x, y: np.zeros((x.shape[0], 1, 1)),
    )
    return ProblemBundle(spec=spec, dom=domain(lam, delta1), interior=interior, exact=exact_solution(b1, c))
