"""First and second quasi-derivatives of the stopped flow and their adjoint processes.

Coefficients (r, pi, P) and their tilde versions come from one of four schemes:

* ``boundary``  near-boundary layer delta1 < psi < lambda, stops on leaving it
* ``interior``  region psi > lambda^2, stops on leaving it
* ``zero``      r = pi = P = 0, the plain flow derivative, runs to the exit from D
* ``switching`` boundary/interior by region with hysteresis, zero below delta1,
  runs to the exit from D
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from engine.errors import (
    DegenerateNormalDiffusionError,
    InvalidArgumentError,
    NotHarmonicError,
    OutOfRegionError,
)
from engine.linalg import antisymmetrize
from engine.problem import DomainSpec, InteriorScheme, ProblemSpec, TestFunction, apply_generator
from engine.sde import PathEnsemble, bisect_crossing
from engine.stats import summarize, z_scores

LOGGER = logging.getLogger(__name__)

SCHEMES = ("boundary", "interior", "zero", "switching")
MODE_ZERO, MODE_BOUNDARY, MODE_INTERIOR = 0, 1, 2
DEGENERATE_A = 1e-10
HARMONIC_TOLERANCE = 1e-8


@dataclass
class QuasiCoeffs:
    r: np.ndarray
    r_tilde: np.ndarray
    pi: np.ndarray
    pi_tilde: np.ndarray
    P: np.ndarray
    P_tilde: np.ndarray

    def __post_init__(self) -> None:
        self.P = antisymmetrize(self.P)
        self.P_tilde = antisymmetrize(self.P_tilde)

    @classmethod
    def zeros(cls, n: int, d1: int) -> "QuasiCoeffs":
        return cls(
            r=np.zeros(n),
            r_tilde=np.zeros(n),
            pi=np.zeros((n, d1)),
            pi_tilde=np.zeros((n, d1)),
            P=np.zeros((n, d1, d1)),
            P_tilde=np.zeros((n, d1, d1)),
        )

    def put(self, rows: np.ndarray, other: "QuasiCoeffs") -> None:
        for name in ("r", "r_tilde", "pi", "pi_tilde", "P", "P_tilde"):
            getattr(self, name)[rows] = getattr(other, name)

    def finite(self) -> np.ndarray:
        parts = [self.r[:, None], self.r_tilde[:, None], self.pi, self.pi_tilde]
        flat = np.concatenate(parts + [self.P.reshape(self.r.size, -1), self.P_tilde.reshape(self.r.size, -1)], axis=1)
        return np.isfinite(flat).all(axis=1)


def phi(dom: DomainSpec, psi: np.ndarray) -> np.ndarray:
    """lambda^2 + psi - psi^2 / (4 lambda)."""
    lam = dom.lam
    return lam**2 + psi - psi**2 / (4.0 * lam)


def normal_diffusion(spec: ProblemSpec, dom: DomainSpec, x: np.ndarray) -> np.ndarray:
    """A(x) = sum_i psi_(sigma_i)(x)^2."""
    psi_sigma = np.einsum("nd,ndj->nj", dom.psi_x(x), spec.sigma(x))
    return np.sum(psi_sigma**2, axis=1)


def boundary_scheme(
    spec: ProblemSpec,
    dom: DomainSpec,
    x: np.ndarray,
    xi: np.ndarray,
    *,
    p: int = 1,
    check: bool = True,
) -> QuasiCoeffs:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    psi = dom.psi(x)
    if check:
        outside = (psi <= dom.delta1) | (psi >= dom.lam)
        if np.any(outside):
            row = int(np.flatnonzero(outside)[0])
            raise OutOfRegionError(
                "boundary scheme needs delta1 < psi(x) < lambda",
                x=x[row].tolist(),
                psi=float(psi[row]),
                delta1=dom.delta1,
                lam=dom.lam,
            )
    grad = dom.psi_x(x)
    hess = dom.psi_xx(x)
    sig = spec.sigma(x)
    psi_sigma = np.einsum("nd,ndj->nj", grad, sig)
    area = np.sum(psi_sigma**2, axis=1)
    if np.any(area <= DEGENERATE_A):
        row = int(np.argmin(area))
        raise DegenerateNormalDiffusionError(
            "normal diffusion A(x) vanishes; (H9) fails at this point",
            x=x[row].tolist(),
            A=float(area[row]),
        )
    d_psi_sigma = np.einsum("nde,ne,ndj->nj", hess, xi, sig) + np.einsum("nd,ndj->nj", grad, spec.sigma_dir(x, xi))
    rho_bar = -np.sum(psi_sigma * d_psi_sigma, axis=1) / area
    psi_xi = np.einsum("nd,nd->n", grad, xi)
    ratio = psi_xi / psi
    skew_half = d_psi_sigma[:, :, None] * psi_sigma[:, None, :] / area[:, None, None]
    n = x.shape[0]
    return QuasiCoeffs(
        r=rho_bar + ratio,
        r_tilde=ratio**2,
        pi=(4.0 * p) * psi_sigma * (psi_xi / (phi(dom, psi) * psi))[:, None],
        pi_tilde=np.zeros((n, spec.d1)),
        P=skew_half - np.swapaxes(skew_half, 1, 2),
        P_tilde=np.zeros((n, spec.d1, spec.d1)),
    )


def interior_scheme(
    spec: ProblemSpec,
    dom: DomainSpec,
    scheme: InteriorScheme,
    x: np.ndarray,
    xi: np.ndarray,
    eta: np.ndarray | None = None,
    *,
    check: bool = True,
) -> QuasiCoeffs:
    """r = <rho, xi>, pi = (M/2) sigma^T xi, P = Q(x, xi); tilde maps applied to eta."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if check:
        psi = dom.psi(x)
        outside = psi <= dom.lam**2
        if np.any(outside):
            row = int(np.flatnonzero(outside)[0])
            raise OutOfRegionError(
                "interior scheme needs psi(x) > lambda^2",
                x=x[row].tolist(),
                psi=float(psi[row]),
                lam=dom.lam,
            )
    rho = scheme.rho(x)
    half_m = 0.5 * scheme.M(x)
    sig_t = np.swapaxes(spec.sigma(x), 1, 2)
    n = x.shape[0]

    def maps(y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.einsum("nd,nd->n", rho, y), half_m[:, None] * np.einsum("njd,nd->nj", sig_t, y), scheme.Q(x, y)

    r, pi, P = maps(xi)
    if eta is None:
        r_t, pi_t, P_t = np.zeros(n), np.zeros((n, spec.d1)), np.zeros((n, spec.d1, spec.d1))
    else:
        r_t, pi_t, P_t = maps(np.atleast_2d(np.asarray(eta, dtype=float)))
    return QuasiCoeffs(r=r, r_tilde=r_t, pi=pi, pi_tilde=pi_t, P=P, P_tilde=P_t)


@dataclass
class QuasiTrajectory:
    scheme: str
    p: int
    h: float
    xi_start: np.ndarray
    xi: np.ndarray
    xi0_adj: np.ndarray
    r: np.ndarray
    r_tilde: np.ndarray
    pi: np.ndarray
    pi_tilde: np.ndarray
    P: np.ndarray
    P_tilde: np.ndarray
    mode: np.ndarray
    stop_index: np.ndarray
    stop_time: np.ndarray
    region_exit: np.ndarray
    stop_state: np.ndarray
    stop_frac: np.ndarray
    stop_raw_state: np.ndarray
    singular: np.ndarray
    stiff: np.ndarray
    localized: np.ndarray
    localization: float | None
    min_A: float
    eta_start: np.ndarray | None = None
    eta: np.ndarray | None = None
    eta0_adj: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return int(self.xi.shape[1])

    @property
    def steps(self) -> int:
        return int(self.r.shape[0])

    def _interp(self, series: np.ndarray) -> np.ndarray:
        idx = np.arange(self.n_paths)
        hi = series[self.stop_index, idx]
        lo = series[np.maximum(self.stop_index - 1, 0), idx]
        frac = self.stop_frac.reshape((-1,) + (1,) * (series.ndim - 2))
        return lo + frac * (hi - lo)

    @property
    def stop_xi(self) -> np.ndarray:
        return self._interp(self.xi)

    @property
    def stop_eta(self) -> np.ndarray | None:
        return None if self.eta is None else self._interp(self.eta)

    def activation(self) -> dict[str, float]:
        return {
            "localized": float(np.mean(self.localized)),
            "singular": float(np.mean(self.singular)),
            "stiff": float(np.mean(self.stiff)),
            "region_exit": float(np.mean(self.region_exit)),
        }


def _region_stops(
    scheme: str, dom: DomainSpec, ens: PathEnsemble, psi_all: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stop index per path and the first grid index outside the scheme's region (steps + 1 if none)."""
    steps = ens.stored_steps
    ens_stop = np.minimum(ens.stop_index, steps)
    if scheme == "boundary":
        out = (psi_all <= dom.delta1) | (psi_all >= dom.lam)
    elif scheme == "interior":
        out = psi_all <= dom.lam**2
    else:
        return ens_stop.copy(), np.full(ens.n_paths, steps + 1)
    idx = np.arange(steps + 1)[:, None]
    first = np.where(out & (idx >= 1), idx, steps + 1).min(axis=0)
    return np.minimum(first, ens_stop), first


def _switching_modes(dom: DomainSpec, psi_all: np.ndarray) -> np.ndarray:
    """Per-step scheme mode with hysteresis: interior -> boundary at lambda^2, boundary -> interior at lambda."""
    lam, lam2, d1 = dom.lam, dom.lam**2, dom.delta1
    psi0 = psi_all[0]
    mode = np.where(psi0 >= lam, MODE_INTERIOR, np.where(psi0 > d1, MODE_BOUNDARY, MODE_ZERO)).astype(np.int8)
    modes = np.empty((psi_all.shape[0] - 1,) + psi0.shape, dtype=np.int8)
    for i in range(psi_all.shape[0] - 1):
        psi = psi_all[i]
        if i:
            to_boundary_from_interior = (mode == MODE_INTERIOR) & (psi <= lam2)
            mode = np.where(to_boundary_from_interior, np.where(psi > d1, MODE_BOUNDARY, MODE_ZERO), mode)
            mode = np.where((mode == MODE_BOUNDARY) & (psi >= lam), MODE_INTERIOR, mode)
            mode = np.where((mode == MODE_BOUNDARY) & (psi <= d1), MODE_ZERO, mode)
            mode = np.where((mode == MODE_ZERO) & (psi >= lam2), MODE_BOUNDARY, mode)
            mode = mode.astype(np.int8)
        modes[i] = mode
    return modes


def _coefficients(
    spec: ProblemSpec,
    dom: DomainSpec,
    interior: InteriorScheme | None,
    mode: np.ndarray,
    x: np.ndarray,
    xi: np.ndarray,
    eta: np.ndarray | None,
    p: int,
) -> tuple[QuasiCoeffs, float]:
    coeffs = QuasiCoeffs.zeros(x.shape[0], spec.d1)
    min_area = np.inf
    bnd = np.flatnonzero(mode == MODE_BOUNDARY)
    if bnd.size:
        coeffs.put(bnd, boundary_scheme(spec, dom, x[bnd], xi[bnd], p=p, check=False))
        min_area = float(normal_diffusion(spec, dom, x[bnd]).min())
    inn = np.flatnonzero(mode == MODE_INTERIOR)
    if inn.size:
        if interior is None:
            raise InvalidArgumentError("interior scheme requested but the problem declares none")
        coeffs.put(inn, interior_scheme(spec, dom, interior, x[inn], xi[inn], None if eta is None else eta[inn], check=False))
    return coeffs, min_area


def _start_mode(scheme: str, dom: DomainSpec, x0: np.ndarray) -> None:
    psi0 = float(dom.psi(x0[None, :])[0])
    if scheme == "boundary" and not dom.delta1 < psi0 < dom.lam:
        raise OutOfRegionError("boundary scheme needs delta1 < psi(x0) < lambda", x=x0.tolist(), psi=psi0)
    if scheme == "interior" and not psi0 > dom.lam**2:
        raise OutOfRegionError("interior scheme needs psi(x0) > lambda^2", x=x0.tolist(), psi=psi0)


def evolve_first(
    ens: PathEnsemble,
    spec: ProblemSpec,
    dom: DomainSpec,
    xi0: Sequence[float] | np.ndarray,
    scheme: str = "boundary",
    *,
    interior: InteriorScheme | None = None,
    p: int = 1,
    localization: float | None = None,
    bisection_steps: int = 40,
) -> QuasiTrajectory:
    """Euler recursion for xi and its adjoint with coefficients frozen within each step."""
    if scheme not in SCHEMES:
        raise InvalidArgumentError("unknown quasi-derivative scheme", scheme=scheme)
    if p not in (1, 2):
        raise InvalidArgumentError("moment order must be 1 or 2", p=p)
    _start_mode(scheme, dom, ens.x0)
    n, d, d1, steps, h = ens.n_paths, ens.d, spec.d1, ens.stored_steps, ens.h
    psi_all = dom.psi(ens.states.reshape(-1, d)).reshape(steps + 1, n)
    stop, first_out = _region_stops(scheme, dom, ens, psi_all)
    if scheme == "switching":
        mode_trace = _switching_modes(dom, psi_all)
    else:
        fixed = {"boundary": MODE_BOUNDARY, "interior": MODE_INTERIOR, "zero": MODE_ZERO}[scheme]
        mode_trace = np.full((steps, n), fixed, dtype=np.int8)

    start = np.broadcast_to(np.asarray(xi0, dtype=float).reshape(d), (n, d))
    xi = np.zeros((steps + 1, n, d))
    xi[0] = start
    adj = np.zeros((steps + 1, n))
    r = np.zeros((steps, n))
    r_t = np.zeros((steps, n))
    pi = np.zeros((steps, n, d1))
    pi_t = np.zeros((steps, n, d1))
    P = np.zeros((steps, n, d1, d1))
    P_t = np.zeros((steps, n, d1, d1))
    singular = np.zeros(n, dtype=bool)
    stiff = np.zeros(n, dtype=bool)
    localized = np.zeros(n, dtype=bool)
    min_area = np.inf
    stream = ens.stream()

    for i in range(steps):
        rows = np.flatnonzero(stop > i)
        xi[i + 1], adj[i + 1] = xi[i], adj[i]
        if rows.size == 0:
            continue
        x, cur = ens.states[i, rows], xi[i, rows]
        dw = stream.increments(i)[rows]
        coeffs, area = _coefficients(spec, dom, interior, mode_trace[i, rows], x, cur, None, p)
        min_area = min(min_area, area)
        bad = ~coeffs.finite()
        if np.any(bad):
            singular[rows[bad]] = True
            stop[rows[bad]] = i
            keep = ~bad
            rows, x, cur, dw = rows[keep], x[keep], cur[keep], dw[keep]
            coeffs = QuasiCoeffs(*(getattr(coeffs, f.name)[keep] for f in dataclasses.fields(QuasiCoeffs)))
        stiff[rows] |= (np.abs(coeffs.r) * h > 1.0) | (np.linalg.norm(coeffs.pi, axis=1) * np.sqrt(h) > 1.0)
        sig = spec.sigma(x)
        diffusion = spec.sigma_dir(x, cur) + coeffs.r[:, None, None] * sig + sig @ coeffs.P
        drift = spec.b_dir(x, cur) + 2.0 * coeffs.r[:, None] * spec.b(x) - np.einsum("ndj,nj->nd", sig, coeffs.pi)
        xi[i + 1, rows] = cur + np.einsum("ndj,nj->nd", diffusion, dw) + drift * h
        adj[i + 1, rows] = adj[i, rows] + np.einsum("nj,nj->n", coeffs.pi, dw)
        r[i, rows], r_t[i, rows] = coeffs.r, coeffs.r_tilde
        pi[i, rows], pi_t[i, rows] = coeffs.pi, coeffs.pi_tilde
        P[i, rows], P_t[i, rows] = coeffs.P, coeffs.P_tilde
        if localization is not None:
            hit = rows[(np.linalg.norm(xi[i + 1, rows], axis=1) >= localization) & (stop[rows] > i + 1)]
            localized[hit] = True
            stop[hit] = i + 1

    idx = np.arange(n)
    stop_frac = np.ones(n)
    stop_state = ens.states[stop, idx].copy()
    raw = stop_state.copy()
    ens_stop = np.minimum(ens.stop_index, steps)
    domain_exit = (stop == ens_stop) & ~ens.capped & ~localized & ~singular
    raw[domain_exit] = ens.overshoot[domain_exit]
    region_exit = (stop == first_out) & ~localized & ~singular
    if np.any(region_exit):
        rows = np.flatnonzero(region_exit)
        before = ens.states[stop[rows] - 1, rows]
        after = ens.states[stop[rows], rows]
        projected = np.empty_like(before)
        fracs = np.empty(rows.size)
        for mask, level_fn in _crossing_levels(scheme, dom, psi_all[stop[rows], rows]):
            if np.any(mask):
                projected[mask], fracs[mask] = bisect_crossing(level_fn, before[mask], after[mask], bisection_steps)
        stop_state[rows] = projected
        stop_frac[rows] = fracs
    stop_time = np.where(stop >= 1, (stop - 1 + stop_frac) * h, 0.0)
    stop_time = np.where(domain_exit & ~region_exit, np.minimum(ens.refined_time, stop * h), stop_time)
    if min_area < np.inf:
        LOGGER.debug("minimum normal diffusion on visited boundary layer: %.3e", min_area)
    if np.any(singular):
        LOGGER.warning("%d paths stopped on non-finite quasi-derivative coefficients", int(singular.sum()))
    return QuasiTrajectory(
        scheme=scheme,
        p=p,
        h=h,
        xi_start=start[0].copy(),
        xi=xi,
        xi0_adj=adj,
        r=r,
        r_tilde=r_t,
        pi=pi,
        pi_tilde=pi_t,
        P=P,
        P_tilde=P_t,
        mode=mode_trace,
        stop_index=stop,
        stop_time=stop_time,
        region_exit=region_exit,
        stop_state=stop_state,
        stop_frac=stop_frac,
        stop_raw_state=raw,
        singular=singular,
        stiff=stiff,
        localized=localized,
        localization=localization,
        min_A=float(min_area),
    )


def _crossing_levels(scheme: str, dom: DomainSpec, psi_after: np.ndarray) -> list[tuple[np.ndarray, Any]]:
    """(mask, level function positive inside the region) for each region level a path can cross."""
    if scheme == "boundary":
        return [
            (psi_after <= dom.delta1, lambda z: dom.psi(z) - dom.delta1),
            (psi_after >= dom.lam, lambda z: dom.lam - dom.psi(z)),
        ]
    return [(np.ones(psi_after.shape, dtype=bool), lambda z: dom.psi(z) - dom.lam**2)]


def evolve_second(
    ens: PathEnsemble,
    spec: ProblemSpec,
    dom: DomainSpec,
    traj: QuasiTrajectory,
    eta0: Sequence[float] | np.ndarray | None = None,
    *,
    interior: InteriorScheme | None = None,
) -> QuasiTrajectory:
    """Add eta and its adjoint to a first-order trajectory (same stops, same coefficient trace)."""
    n, d, steps, h = ens.n_paths, ens.d, traj.steps, ens.h
    if traj.xi.shape[1] != n or steps != ens.stored_steps:
        raise InvalidArgumentError("trajectory does not belong to this ensemble")
    start = np.zeros(d) if eta0 is None else np.asarray(eta0, dtype=float).reshape(d)
    eta = np.zeros((steps + 1, n, d))
    eta[0] = start
    eta_adj = np.zeros((steps + 1, n))
    quad_var = np.zeros(n)
    tilde_mart = np.zeros(n)
    r_t, pi_t, P_t = traj.r_tilde.copy(), traj.pi_tilde.copy(), traj.P_tilde.copy()
    stream = ens.stream()

    for i in range(steps):
        rows = np.flatnonzero(traj.stop_index > i)
        eta[i + 1], eta_adj[i + 1] = eta[i], eta_adj[i]
        if rows.size == 0:
            continue
        x, xi, et = ens.states[i, rows], traj.xi[i, rows], eta[i, rows]
        dw = stream.increments(i)[rows]
        inn = traj.mode[i, rows] == MODE_INTERIOR
        if np.any(inn):
            if interior is None:
                raise InvalidArgumentError("interior scheme requested but the problem declares none")
            tilde = interior_scheme(spec, dom, interior, x[inn], xi[inn], et[inn], check=False)
            sel = rows[inn]
            r_t[i, sel], pi_t[i, sel], P_t[i, sel] = tilde.r_tilde, tilde.pi_tilde, tilde.P_tilde
        r, rt = traj.r[i, rows], r_t[i, rows]
        pi, pit = traj.pi[i, rows], pi_t[i, rows]
        Pm, Pt = traj.P[i, rows], P_t[i, rows]
        sig = spec.sigma(x)
        s_xi = spec.sigma_dir(x, xi)
        b_xi = spec.b_dir(x, xi)
        bvec = spec.b(x)
        rr = r[:, None, None]
        diffusion = (
            spec.sigma_dir(x, et)
            + rt[:, None, None] * sig
            + sig @ Pt
            + spec.sigma_dir2(x, xi, xi)
            + 2.0 * rr * s_xi
            - rr**2 * sig
            + 2.0 * s_xi @ Pm
            + 2.0 * rr * (sig @ Pm)
            + sig @ Pm @ Pm
        )
        drift = (
            spec.b_dir(x, et)
            + 2.0 * rt[:, None] * bvec
            - np.einsum("ndj,nj->nd", sig, pit)
            + spec.b_dir2(x, xi, xi)
            + 4.0 * r[:, None] * b_xi
            - 2.0 * np.einsum("ndj,nj->nd", s_xi, pi)
            - 2.0 * r[:, None] * np.einsum("ndj,nj->nd", sig, pi)
            - 2.0 * np.einsum("ndj,njk,nk->nd", sig, Pm, pi)
        )
        eta[i + 1, rows] = et + np.einsum("ndj,nj->nd", diffusion, dw) + drift * h
        quad_var[rows] += np.sum(pi**2, axis=1) * h
        tilde_mart[rows] += np.einsum("nj,nj->n", pit, dw)
        eta_adj[i + 1, rows] = traj.xi0_adj[i + 1, rows] ** 2 - quad_var[rows] + tilde_mart[rows]

    return dataclasses.replace(
        traj,
        eta_start=start,
        eta=eta,
        eta0_adj=eta_adj,
        r_tilde=r_t,
        pi_tilde=pi_t,
        P_tilde=P_t,
    )


# ---------------------------------------------------------------- martingale identity


def _checkpoint_indices(checkpoints: Sequence[float], h: float) -> list[int]:
    times = list(checkpoints)
    if not times or any(t <= 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidArgumentError("checkpoints must be positive and strictly increasing", checkpoints=times)
    return [int(round(t / h)) for t in times]


def check_harmonic(spec: ProblemSpec, dom: DomainSpec, v: TestFunction, *, resolution: int = 17, tolerance: float = HARMONIC_TOLERANCE) -> float:
    pts = dom.grid(resolution)
    residual = float(np.max(np.abs(apply_generator(spec, pts, v.grad(pts), v.hess(pts)))))
    scale = 1.0 + float(np.max(np.abs(v.value(pts))))
    if residual > tolerance * scale:
        raise NotHarmonicError(f"L{v.name} does not vanish on D", residual=residual, tolerance=tolerance * scale)
    return residual


def state_at(traj: QuasiTrajectory, ens: PathEnsemble, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, index, stopped) at grid index ``step`` stopped at the trajectory stop; raw Euler state at a domain exit."""
    idx = np.minimum(step, traj.stop_index)
    stopped = traj.stop_index <= step
    x = ens.states[np.minimum(idx, ens.stored_steps), np.arange(ens.n_paths)]
    x = np.where(stopped[:, None], traj.stop_raw_state, x)
    return x, idx, stopped


def martingale_samples(
    v: TestFunction,
    ens: PathEnsemble,
    traj: QuasiTrajectory,
    step: int,
    *,
    order: int = 1,
) -> np.ndarray:
    x, idx, _ = state_at(traj, ens, step)
    cols = np.arange(ens.n_paths)
    xi = traj.xi[idx, cols]
    adj = traj.xi0_adj[idx, cols]
    value = v.value(x)
    grad = v.grad(x)
    dv_xi = np.einsum("nd,nd->n", grad, xi)
    if order == 1:
        return dv_xi + adj * value
    if traj.eta is None or traj.eta0_adj is None:
        raise InvalidArgumentError("second-order identity needs an evolved eta")
    eta = traj.eta[idx, cols]
    eta_adj = traj.eta0_adj[idx, cols]
    hess_term = np.einsum("nd,nde,ne->n", xi, v.hess(x), xi)
    return hess_term + np.einsum("nd,nd->n", grad, eta) + 2.0 * adj * dv_xi + eta_adj * value


@dataclass(frozen=True)
class MartingaleReport:
    function: str
    order: int
    checkpoints: list[float]
    means: list[float]
    se: list[float]
    z: list[float]
    n_paths: int

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z))) if self.z else 0.0

    def as_rows(self) -> list[dict[str, Any]]:
        return [
            {"function": self.function, "order": self.order, "checkpoint": t, "mean": m, "stderr": s, "z": z}
            for t, m, s, z in zip(self.checkpoints, self.means, self.se, self.z)
        ]


def martingale_statistic(
    v: TestFunction,
    spec: ProblemSpec,
    dom: DomainSpec,
    ens: PathEnsemble,
    traj: QuasiTrajectory,
    checkpoints: Sequence[float],
    *,
    order: int = 1,
    check: bool = True,
) -> MartingaleReport:
    """Drift z-scores of m_{t_j} - m_{t_{j-1}} (t_0 = 0) for the quasi-derivative martingale identity."""
    if check:
        check_harmonic(spec, dom, v)
    indices = _checkpoint_indices(checkpoints, ens.h)
    previous = martingale_samples(v, ens, traj, 0, order=order)
    means, ses, zs = [], [], []
    for step in indices:
        current = martingale_samples(v, ens, traj, step, order=order)
        summary = summarize(current - previous)
        means.append(float(summary.mean[0]))
        ses.append(float(summary.se[0]))
        zs.append(float(z_scores(summary.mean, summary.se)[0]))
        previous = current
    return MartingaleReport(v.name, order, list(checkpoints), means, ses, zs, ens.n_paths)


_TRAJ_ARRAYS = (
    "xi_start", "xi", "xi0_adj", "r", "r_tilde", "pi", "pi_tilde", "P", "P_tilde", "mode",
    "stop_index", "stop_time", "region_exit", "stop_state", "stop_frac", "stop_raw_state",
    "singular", "stiff", "localized",
)


def save_trajectory(traj: QuasiTrajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: getattr(traj, name) for name in _TRAJ_ARRAYS}
    if traj.eta is not None:
        arrays.update(eta_start=traj.eta_start, eta=traj.eta, eta0_adj=traj.eta0_adj)
    header = np.array([traj.h, traj.p, np.nan if traj.localization is None else traj.localization, traj.min_A])
    with path.open("wb") as handle:
        np.savez_compressed(handle, header=header, scheme=np.array(traj.scheme), **arrays)
    return path


def load_trajectory(path: str | Path) -> QuasiTrajectory:
    with np.load(Path(path)) as archive:
        h, p, localization, min_area = archive["header"].tolist()
        arrays = {name: archive[name] for name in _TRAJ_ARRAYS}
        extra = {name: archive[name] for name in ("eta_start", "eta", "eta0_adj") if name in archive.files}
        scheme = str(archive["scheme"])
    return QuasiTrajectory(
        scheme=scheme,
        p=int(p),
        h=h,
        localization=None if np.isnan(localization) else localization,
        min_A=min_area,
        **arrays,
        **extra,
    )
