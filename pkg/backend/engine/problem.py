"""Problem data, domains, norm estimates and hypothesis checks.

All callbacks are batched over points: ``x`` has shape (n, d) and a callback
returns one value per row. Shapes:

* sigma(x) -> (n, d, d1); sigma_dir(x, y) and sigma_dir2(x, y, z) likewise
* b(x) -> (n, d); b_dir(x, y), b_dir2(x, y, z) likewise
* f(x, y, z) -> (n, k) with y (n, k) and z (n, k, d1);
  f_x -> (n, k, d), f_y -> (n, k, k), f_z -> (n, k, k, d1)
* g(x) -> (n, k), g_x -> (n, k, d), g_xx -> (n, k, d, d)
* psi(x) -> (n,), psi_x -> (n, d), psi_xx -> (n, d, d)
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from engine.errors import CallbackEvaluationError, DerivativeMismatchError, InvalidArgumentError

LOGGER = logging.getLogger(__name__)

Callback = Callable[..., np.ndarray]

H7_TOLERANCE = 1e-12
PSD_TOLERANCE = 1e-10
H2_TOLERANCE = 1e-9
UNIT_TOLERANCE = 1e-8
SCHEME_TOLERANCE = 1e-12


@dataclass(frozen=True)
class StructuralConstants:
    mu: float
    L: float
    L0: float
    beta: float
    vartheta: float
    K0: float

    def replace(self, **changes: float) -> "StructuralConstants":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    d1: int
    k: int
    sigma: Callback
    sigma_dir: Callback
    sigma_dir2: Callback
    b: Callback
    b_dir: Callback
    b_dir2: Callback
    f: Callback
    f_x: Callback
    f_y: Callback
    f_z: Callback
    g: Callback
    g_x: Callback
    g_xx: Callback
    constants: StructuralConstants
    yz_box: float = 10.0

    def diffusion_matrix(self, x: np.ndarray) -> np.ndarray:
        sig = self.sigma(x)
        return 0.5 * sig @ np.swapaxes(sig, 1, 2)

    def driver_at_zero(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        return self.f(x, np.zeros((n, self.k)), np.zeros((n, self.k, self.d1)))

    def with_constants(self, **changes: float) -> "ProblemSpec":
        return dataclasses.replace(self, constants=self.constants.replace(**changes))


def apply_generator(spec: ProblemSpec, x: np.ndarray, grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """L v = sum a_ij d_ij v + b . grad v for a scalar v given its derivatives."""
    a = spec.diffusion_matrix(x)
    return np.einsum("nij,nij->n", a, hess) + np.einsum("ni,ni->n", spec.b(x), grad)


def ray_directions(d: int, count: int) -> np.ndarray:
    if d == 1:
        signs = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
        return signs[:, None]
    if d == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(angles), np.sin(angles)])
    key = np.array([0x5EED, d], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    raw = gen.standard_normal((count, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


@dataclass(frozen=True)
class DomainSpec:
    psi: Callback
    psi_x: Callback
    psi_xx: Callback
    lam: float
    delta1: float
    center: tuple[float, ...]
    radius: float
    psi_sup: float

    def __post_init__(self) -> None:
        if not 0.0 < self.lam < 1.0:
            raise InvalidArgumentError("lambda must lie in (0, 1)", lam=self.lam)
        if not 0.0 < self.delta1 < self.lam**2:
            raise InvalidArgumentError("delta1 must satisfy 0 < delta1 < lambda^2", lam=self.lam, delta1=self.delta1)

    @property
    def d(self) -> int:
        return len(self.center)

    def with_region(self, lam: float, delta1: float | None = None) -> "DomainSpec":
        if delta1 is None:
            delta1 = min(self.delta1, 0.5 * lam**2)
        return dataclasses.replace(self, lam=lam, delta1=delta1)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.psi(x) > 0.0

    def in_boundary_layer(self, x: np.ndarray) -> np.ndarray:
        values = self.psi(x)
        return (values > self.delta1) & (values < self.lam)

    def in_interior_region(self, x: np.ndarray) -> np.ndarray:
        return self.psi(x) > self.lam**2

    def directional(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.einsum("ni,ni->n", self.psi_x(x), y)

    def level_points(self, level: float, count: int, iterations: int = 200) -> np.ndarray:
        """Points on {psi = level} found by bisection along rays from ``center``.

        Assumes psi decreases along every ray from the center and is <= level
        at distance ``radius``.
        """
        center = np.asarray(self.center, dtype=float)
        directions = ray_directions(self.d, count)
        lo = np.zeros(count)
        hi = np.full(count, self.radius)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if np.all((mid == lo) | (mid == hi)):
                break
            inside = self.psi(center + mid[:, None] * directions) > level
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        lo_pts = center + lo[:, None] * directions
        hi_pts = center + hi[:, None] * directions
        closer = np.abs(self.psi(lo_pts) - level) <= np.abs(self.psi(hi_pts) - level)
        return np.where(closer[:, None], lo_pts, hi_pts)

    def grid(self, resolution: int) -> np.ndarray:
        """Tensor grid over the bounding box, restricted to psi > 0."""
        center = np.asarray(self.center, dtype=float)
        axes = [np.linspace(c - self.radius, c + self.radius, resolution) for c in center]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        return mesh[self.psi(mesh) > 0.0]

    def closure_grid(self, resolution: int) -> np.ndarray:
        boundary_count = 2 if self.d == 1 else 4 * (resolution - 1)
        return np.concatenate([self.grid(resolution), self.level_points(0.0, boundary_count)], axis=0)


@dataclass(frozen=True)
class InteriorScheme:
    rho: Callback
    M: Callback
    Q: Callback


@dataclass(frozen=True)
class ExactSolution:
    u: Callback
    u_x: Callback
    u_xx: Callback


@dataclass(frozen=True)
class TestFunction:
    __test__ = False

    name: str
    value: Callback
    grad: Callback
    hess: Callback


@dataclass(frozen=True)
class ProblemBundle:
    spec: ProblemSpec
    dom: DomainSpec
    interior: InteriorScheme | None = None
    exact: ExactSolution | None = None
    harmonic_panel: tuple[TestFunction, ...] = ()

    def with_region(self, lam: float, delta1: float | None = None) -> "ProblemBundle":
        return dataclasses.replace(self, dom=self.dom.with_region(lam, delta1))


def _evaluate(name: str, fn: Callback, x: np.ndarray, *args: np.ndarray) -> np.ndarray:
    """Run a batched callback; on failure re-run row by row to name the offending point."""
    try:
        values = np.asarray(fn(x, *args), dtype=float)
    except Exception as exc:
        for row in range(x.shape[0]):
            try:
                fn(x[row : row + 1], *(a[row : row + 1] for a in args))
            except Exception:
                raise CallbackEvaluationError(
                    f"{name} failed at x={x[row].tolist()}: {exc}",
                    callback=name,
                    point=x[row].tolist(),
                ) from exc
        raise CallbackEvaluationError(f"{name} failed on batch: {exc}", callback=name) from exc
    finite = np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1) if values.ndim else np.isfinite(values)
    if values.ndim and not np.all(finite):
        row = int(np.flatnonzero(~finite)[0])
        raise CallbackEvaluationError(
            f"{name} returned a non-finite value at x={x[row].tolist()}",
            callback=name,
            point=x[row].tolist(),
        )
    return values


# ---------------------------------------------------------------- hypotheses


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool | None
    margin: float
    witness: list[float] | None
    note: str = ""

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class HypothesisReport:
    checks: dict[str, HypothesisCheck]

    @property
    def passed(self) -> bool:
        return all(check.passed is not False for check in self.checks.values())

    def failed(self) -> list[str]:
        return [name for name, check in self.checks.items() if check.passed is False]

    def as_dict(self) -> dict[str, Any]:
        return {name: check.as_dict() for name, check in self.checks.items()}


def _witness(points: np.ndarray, values: np.ndarray) -> tuple[float, list[float]]:
    idx = int(np.argmax(values))
    return float(values[idx]), points[idx].tolist()


def _sup_norm(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(values.reshape(values.shape[0], -1) ** 2, axis=1))


def _c2_profile(points: np.ndarray, value: Callback, first: Callable[[np.ndarray, np.ndarray], np.ndarray], second: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray], d: int) -> np.ndarray:
    """Pointwise |h| + |h_x| + |h_xx| for a vector/matrix field from directional derivatives."""
    n = points.shape[0]
    eye = np.eye(d)
    unit = [np.broadcast_to(eye[i], (n, d)) for i in range(d)]
    base = _sup_norm(value(points))
    grad_sq = sum(_sup_norm(first(points, unit[i])) ** 2 for i in range(d))
    hess_sq = sum(_sup_norm(second(points, unit[i], unit[j])) ** 2 for i in range(d) for j in range(d))
    return base + np.sqrt(grad_sq) + np.sqrt(hess_sq)


def validate_hypotheses(
    spec: ProblemSpec,
    dom: DomainSpec,
    grid: np.ndarray,
    boundary: np.ndarray | None = None,
    *,
    boundary_tolerance: float = 1e-3,
    boundary_count: int = 64,
) -> HypothesisReport:
    """Sample-based checks of (H2), (H3), (H9) and positive semi-definiteness of a."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise InvalidArgumentError("hypothesis grid is empty")
    psi_grid = _evaluate("psi", dom.psi, grid)
    if np.any(psi_grid <= 0.0):
        row = int(np.flatnonzero(psi_grid <= 0.0)[0])
        raise InvalidArgumentError("grid point outside D", point=grid[row].tolist())
    if boundary is None:
        boundary = dom.level_points(0.0, boundary_count)
    boundary = np.asarray(boundary, dtype=float).reshape(-1, spec.d)
    if boundary.size:
        off = np.abs(_evaluate("psi", dom.psi, boundary)) > boundary_tolerance
        if np.any(off):
            row = int(np.flatnonzero(off)[0])
            raise InvalidArgumentError("boundary sample not within tolerance of psi = 0", point=boundary[row].tolist())

    checks: dict[str, HypothesisCheck] = {}

    grad = _evaluate("psi_x", dom.psi_x, grid)
    hess = _evaluate("psi_xx", dom.psi_xx, grid)
    _evaluate("sigma", spec.sigma, grid)
    _evaluate("b", spec.b, grid)
    l_psi = apply_generator(spec, grid, grad, hess)
    margin, witness = _witness(grid, l_psi + 1.0)
    checks["H2"] = HypothesisCheck("H2", margin <= 0.0, margin, witness, "max over grid of L psi + 1")

    a_grid = spec.diffusion_matrix(grid)
    eigen_min = np.linalg.eigvalsh(a_grid)[:, 0]
    margin, witness = _witness(grid, -eigen_min)
    checks["PSD"] = HypothesisCheck("PSD", margin <= PSD_TOLERANCE, margin, witness, "max over grid of -min eig a")

    sigma_profile = _c2_profile(grid, spec.sigma, spec.sigma_dir, spec.sigma_dir2, spec.d)
    b_profile = _c2_profile(grid, spec.b, spec.b_dir, spec.b_dir2, spec.d)
    psi_profile = np.abs(psi_grid) + np.linalg.norm(grad, axis=1) + np.linalg.norm(hess.reshape(hess.shape[0], -1), axis=1)
    total = float(sigma_profile.max() + b_profile.max() + psi_profile.max())
    witness = grid[int(np.argmax(sigma_profile + b_profile + psi_profile))].tolist()
    checks["H3"] = HypothesisCheck(
        "H3",
        total <= spec.constants.K0,
        total - spec.constants.K0,
        witness,
        "grid estimate of |sigma|_2 + |b|_2 + |psi|_2 minus K0; |psi|_4 not checked",
    )

    if boundary.size:
        bgrad = _evaluate("psi_x", dom.psi_x, boundary)
        norms = np.linalg.norm(bgrad, axis=1)
        margin, witness = _witness(boundary, 1.0 - norms)
        checks["H2_boundary"] = HypothesisCheck("H2_boundary", margin <= H2_TOLERANCE, margin, witness, "max over boundary of 1 - |psi_x|")
        normals = bgrad / np.where(norms > 0, norms, 1.0)[:, None]
        a_bnd = spec.diffusion_matrix(boundary)
        quad = np.einsum("ni,nij,nj->n", normals, a_bnd, normals)
        margin, witness = _witness(boundary, -quad)
        checks["H9"] = HypothesisCheck("H9", margin < 0.0, margin, witness, "max over boundary of -<a n, n>")
    else:
        checks["H2_boundary"] = HypothesisCheck("H2_boundary", None, float("nan"), None, "no boundary samples")
        checks["H9"] = HypothesisCheck("H9", None, float("nan"), None, "no boundary samples")
    return HypothesisReport(checks)


@dataclass(frozen=True)
class H7Check:
    passed: bool
    clauses: dict[str, bool]

    def as_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "clauses": dict(self.clauses)}


def check_h7(mu: float, L: float, L0: float, beta: float, vartheta: float) -> H7Check:
    clauses = {
        "0<mu<L": bool(0.0 < mu < L),
        "-mu+2L0^2<2beta": bool(-mu + 2.0 * L0**2 < 2.0 * beta),
        "2beta<0": bool(2.0 * beta < 0.0),
        "2vartheta=-2mu+L0^2": bool(abs(2.0 * vartheta - (-2.0 * mu + L0**2)) <= H7_TOLERANCE),
    }
    return H7Check(passed=all(clauses.values()), clauses=clauses)


@dataclass(frozen=True)
class H10Check:
    passed: bool
    margin: float
    witness_x: list[float]
    witness_y: list[float]
    margins: np.ndarray = field(repr=False)

    def as_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "margin": self.margin, "witness_x": self.witness_x, "witness_y": self.witness_y}


def h10_margins(
    spec: ProblemSpec,
    scheme: InteriorScheme,
    p: float,
    beta: float,
    xs: np.ndarray,
    ys: np.ndarray,
) -> np.ndarray:
    """LHS - RHS of the moment-growth inequality at each (x, y) sample."""
    sig = spec.sigma(xs)
    ry = np.einsum("ni,ni->n", scheme.rho(xs), ys)
    mat = spec.sigma_dir(xs, ys) + ry[:, None, None] * sig + sig @ scheme.Q(xs, ys)
    drift = spec.b_dir(xs, ys) + 2.0 * ry[:, None] * spec.b(xs)
    lhs = 2.0 * p * (4.0 * p - 1.0) * np.sum(mat**2, axis=(1, 2)) + 4.0 * p * np.einsum("ni,ni->n", ys, drift)
    quad = np.einsum("ni,nij,nj->n", ys, spec.diffusion_matrix(xs), ys)
    rhs = (-4.0 * p * beta - 1.0) + 2.0 * p * scheme.M(xs) * quad
    return lhs - rhs


def check_h10(
    spec: ProblemSpec,
    dom: DomainSpec,
    scheme: InteriorScheme,
    p: float,
    beta: float,
    xs: np.ndarray,
    ys: np.ndarray,
) -> H10Check:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape != ys.shape:
        raise InvalidArgumentError("x and y samples must pair up", x_shape=list(xs.shape), y_shape=list(ys.shape))
    deviation = np.abs(np.linalg.norm(ys, axis=1) - 1.0)
    if np.any(deviation > UNIT_TOLERANCE):
        row = int(np.argmax(deviation))
        raise InvalidArgumentError("direction samples must have |y| = 1", y=ys[row].tolist())
    if np.any(dom.psi(xs) <= 0.0):
        raise InvalidArgumentError("state samples must lie in D")
    margins = h10_margins(spec, scheme, p, beta, xs, ys)
    idx = int(np.argmax(margins))
    return H10Check(
        passed=bool(margins[idx] <= 0.0),
        margin=float(margins[idx]),
        witness_x=xs[idx].tolist(),
        witness_y=ys[idx].tolist(),
        margins=margins,
    )


def check_interior_scheme(scheme: InteriorScheme, xs: np.ndarray, seed: int = 0) -> dict[str, float]:
    """Skew-symmetry and linearity defects of Q on sample points."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, d = xs.shape
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0x51EB], dtype=np.uint64)))
    y, z = gen.standard_normal((n, d)), gen.standard_normal((n, d))
    alpha = gen.uniform(-2.0, 2.0, size=n)
    qy, qz = scheme.Q(xs, y), scheme.Q(xs, z)
    skew = float(np.max(np.abs(qy + np.swapaxes(qy, 1, 2)))) if qy.size else 0.0
    combo = scheme.Q(xs, alpha[:, None] * y + z)
    scale = 1.0 + float(np.max(np.abs(qy))) + float(np.max(np.abs(qz))) if qy.size else 1.0
    linear = float(np.max(np.abs(combo - (alpha[:, None, None] * qy + qz)))) / scale if qy.size else 0.0
    if skew > SCHEME_TOLERANCE or linear > SCHEME_TOLERANCE:
        raise InvalidArgumentError("interior scheme Q must be skew-symmetric and linear in y", skew=skew, linearity=linear)
    return {"skew": skew, "linearity": linear}


# ---------------------------------------------------------------- norms


@dataclass(frozen=True)
class NormReport:
    g0: float
    g1: float
    g2: float
    g01: float
    g11: float
    f0: float
    f_lip_x: float
    f01: float
    f11: float
    psi2: float
    grid_resolution: int
    n_points: int
    lower_bound: bool = True

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _pair_indices(n: int, budget: int, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    total = n * (n - 1) // 2
    if total <= budget:
        return np.triu_indices(n, k=1)
    left = gen.integers(0, n, size=budget)
    right = gen.integers(0, n, size=budget)
    keep = left != right
    return left[keep], right[keep]


def _lipschitz(points: np.ndarray, values: np.ndarray, pairs: tuple[np.ndarray, np.ndarray], chunk: int = 200_000) -> float:
    left, right = pairs
    flat = values.reshape(values.shape[0], -1)
    best = 0.0
    for start in range(0, left.size, chunk):
        li, ri = left[start : start + chunk], right[start : start + chunk]
        dist = np.linalg.norm(points[li] - points[ri], axis=1)
        ok = dist > 1e-14
        if not np.any(ok):
            continue
        diff = np.linalg.norm(flat[li[ok]] - flat[ri[ok]], axis=1)
        best = max(best, float(np.max(diff / dist[ok])))
    return best


def _yz_samples(spec: ProblemSpec, count: int, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ys = gen.uniform(-spec.yz_box, spec.yz_box, size=(count, spec.k))
    zs = gen.uniform(-spec.yz_box, spec.yz_box, size=(count, spec.k, spec.d1))
    ys[0] = 0.0
    zs[0] = 0.0
    return ys, zs


def compute_norms(
    spec: ProblemSpec,
    dom: DomainSpec,
    grid_resolution: int,
    *,
    pair_budget: int = 1_000_000,
    yz_count: int = 8,
    seed: int = 0,
) -> NormReport:
    """Grid estimates of the norms entering the interior estimates (lower bounds of the suprema)."""
    if grid_resolution < 8:
        raise InvalidArgumentError("grid_resolution must be at least 8 per axis", grid_resolution=grid_resolution)
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0x4E0E], dtype=np.uint64)))
    pts = dom.closure_grid(grid_resolution)
    n = pts.shape[0]
    pairs = _pair_indices(n, pair_budget, gen)

    g_val = _evaluate("g", spec.g, pts)
    g_grad = _evaluate("g_x", spec.g_x, pts)
    g_hess = _evaluate("g_xx", spec.g_xx, pts)
    g0 = float(_sup_norm(g_val).max())
    g1 = g0 + float(_sup_norm(g_grad).max())
    g2 = g1 + float(_sup_norm(g_hess).max())
    g01 = g0 + _lipschitz(pts, g_val, pairs)
    g11 = g1 + _lipschitz(pts, g_grad, pairs)

    f_zero = _evaluate("f", spec.driver_at_zero, pts)
    f0 = float(_sup_norm(f_zero).max())
    ys, zs = _yz_samples(spec, yz_count, gen)
    f_lip_x = 0.0
    for j in range(yz_count):
        yb = np.broadcast_to(ys[j], (n, spec.k))
        zb = np.broadcast_to(zs[j], (n, spec.k, spec.d1))
        f_lip_x = max(f_lip_x, _lipschitz(pts, _evaluate("f", spec.f, pts, yb, zb), pairs))

    stride = max(1, n // 64)
    xs = pts[::stride]
    m = xs.shape[0]
    xi_x = np.repeat(xs, yz_count, axis=0)
    xi_y = np.tile(ys, (m, 1))
    xi_z = np.tile(zs, (m, 1, 1))
    derivs = np.concatenate(
        [
            _evaluate("f_x", spec.f_x, xi_x, xi_y, xi_z).reshape(m * yz_count, -1),
            _evaluate("f_y", spec.f_y, xi_x, xi_y, xi_z).reshape(m * yz_count, -1),
            _evaluate("f_z", spec.f_z, xi_x, xi_y, xi_z).reshape(m * yz_count, -1),
        ],
        axis=1,
    )
    stacked = np.concatenate([xi_x, xi_y, xi_z.reshape(m * yz_count, -1)], axis=1)
    f11 = _lipschitz(stacked, derivs, _pair_indices(stacked.shape[0], pair_budget, gen))

    psi_val = dom.psi(pts)
    psi2 = float(np.abs(psi_val).max() + np.linalg.norm(dom.psi_x(pts), axis=1).max() + _sup_norm(dom.psi_xx(pts)).max())
    return NormReport(
        g0=g0,
        g1=g1,
        g2=g2,
        g01=g01,
        g11=g11,
        f0=f0,
        f_lip_x=f_lip_x,
        f01=f0 + f_lip_x,
        f11=f11,
        psi2=psi2,
        grid_resolution=grid_resolution,
        n_points=n,
    )


# ---------------------------------------------------------------- derivative gate


def _gate(name: str, analytic: np.ndarray, numeric: np.ndarray, points: np.ndarray, rtol: float) -> float:
    analytic = analytic.reshape(analytic.shape[0], -1)
    numeric = numeric.reshape(numeric.shape[0], -1)
    excess = np.abs(analytic - numeric) - rtol * (1.0 + np.abs(numeric))
    worst = np.max(excess, axis=1)
    row = int(np.argmax(worst))
    deviation = float(np.max(np.abs(analytic - numeric)))
    if worst[row] > 0.0:
        raise DerivativeMismatchError(
            f"{name} disagrees with central differences at x={points[row].tolist()}",
            callback=name,
            point=points[row].tolist(),
            deviation=deviation,
        )
    return deviation


def check_derivatives(
    spec: ProblemSpec,
    dom: DomainSpec,
    points: np.ndarray,
    *,
    rtol: float = 1e-5,
    step: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Cross-check every derivative callback against central differences of its base callback."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = x.shape
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0xFD], dtype=np.uint64)))
    y = gen.standard_normal((n, d))
    z = gen.standard_normal((n, d))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    e = step

    def central(fn: Callable[[np.ndarray], np.ndarray], direction: np.ndarray) -> np.ndarray:
        return (fn(x + e * direction) - fn(x - e * direction)) / (2.0 * e)

    out: dict[str, float] = {}
    out["sigma_dir"] = _gate("sigma_dir", spec.sigma_dir(x, y), central(spec.sigma, y), x, rtol)
    out["sigma_dir2"] = _gate("sigma_dir2", spec.sigma_dir2(x, y, z), central(lambda p: spec.sigma_dir(p, y), z), x, rtol)
    out["b_dir"] = _gate("b_dir", spec.b_dir(x, y), central(spec.b, y), x, rtol)
    out["b_dir2"] = _gate("b_dir2", spec.b_dir2(x, y, z), central(lambda p: spec.b_dir(p, y), z), x, rtol)
    out["g_x"] = _gate("g_x", np.einsum("nkd,nd->nk", spec.g_x(x), y), central(spec.g, y), x, rtol)
    out["g_xx"] = _gate("g_xx", np.einsum("nkde,ne->nkd", spec.g_xx(x), z), central(spec.g_x, z), x, rtol)
    out["psi_x"] = _gate("psi_x", np.einsum("nd,nd->n", dom.psi_x(x), y), central(dom.psi, y), x, rtol)
    out["psi_xx"] = _gate("psi_xx", np.einsum("nde,ne->nd", dom.psi_xx(x), z), central(dom.psi_x, z), x, rtol)

    yy = gen.uniform(-1.0, 1.0, size=(n, spec.k))
    zz = gen.uniform(-1.0, 1.0, size=(n, spec.k, spec.d1))
    wy = gen.standard_normal((n, spec.k))
    wz = gen.standard_normal((n, spec.k, spec.d1))
    out["f_x"] = _gate(
        "f_x",
        np.einsum("nkd,nd->nk", spec.f_x(x, yy, zz), y),
        central(lambda p: spec.f(p, yy, zz), y),
        x,
        rtol,
    )
    out["f_y"] = _gate(
        "f_y",
        np.einsum("nkj,nj->nk", spec.f_y(x, yy, zz), wy),
        (spec.f(x, yy + e * wy, zz) - spec.f(x, yy - e * wy, zz)) / (2.0 * e),
        x,
        rtol,
    )
    out["f_z"] = _gate(
        "f_z",
        np.einsum("nkjl,njl->nk", spec.f_z(x, yy, zz), wz),
        (spec.f(x, yy, zz + e * wz) - spec.f(x, yy, zz - e * wz)) / (2.0 * e),
        x,
        rtol,
    )
    LOGGER.debug("derivative gate passed for %s: %s", spec.name, out)
    return out
