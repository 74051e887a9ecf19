"""Fréchet and Malliavin derivatives of the random NSE flow.

Both derivatives solve the linearization of dv = -A v - Q B(v) along a stored trajectory,
    d eta = -A eta - Q [B(eta, v) + B(v, eta)] dt - forcing,
with no forcing for the Fréchet derivative (eta(0) = h) and forcing sigma Q B(v, v) for
s >= u for the Malliavin derivative D_u v (eta = 0 up to u).  The recursions below are the
exact derivatives of the exponential-Euler map used for v, so finite differences of the
discrete flow agree with them up to O(eps).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import SpectralBasis
from .galerkin import SolverConfig, integrate_random_nse, trapezoid
from .wiener import GrowthPath, WienerPath, cameron_martin_shift, growth_process


@dataclass(frozen=True, eq=False)
class TangentTrajectory:
    times: np.ndarray
    states: np.ndarray  # (N + 1, n), or (N + 1, m, n) for a batch of directions
    kind: str  # "frechet" or "malliavin"
    u: float | None = None


@dataclass(frozen=True, eq=False)
class MalliavinGrid:
    u_nodes: np.ndarray  # indices into the time grid
    times: np.ndarray
    values: np.ndarray  # (M, N + 1, n): values[k, i] = D_{u_k} v(t_i)

    @property
    def u(self) -> np.ndarray:
        return self.times[self.u_nodes]

    def to_csv(self, path: str | Path) -> None:
        norms = np.linalg.norm(self.values, axis=2)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "t", "h_norm"])
            for k, uk in enumerate(self.u):
                for i, t in enumerate(self.times):
                    w.writerow([repr(float(uk)), repr(float(t)), repr(float(norms[k, i]))])


def _decay(basis: SpectralBasis, cfg: SolverConfig) -> np.ndarray:
    if cfg.scheme == "exponential-euler":
        return np.exp(-cfg.nu * basis.eigenvalues * cfg.dt)
    return 1.0 / (1.0 + cfg.nu * basis.eigenvalues * cfg.dt)


def _check(v_states, Q: GrowthPath, cfg: SolverConfig) -> None:
    cfg.check_grid(Q)
    if len(v_states) != cfg.N + 1:
        raise ValueError(f"trajectory has {len(v_states) - 1} steps, solver grid has {cfg.N}")


def _states(traj) -> np.ndarray:
    return np.asarray(getattr(traj, "states", traj), dtype=float)


def propagate_linear(basis: SpectralBasis, v_states, Q: GrowthPath, cfg: SolverConfig, X0,
                     start: int = 0, forcing: float = 0.0) -> np.ndarray:
    """Run eta+ = E * (eta - dt Q [J(v) eta + forcing B(v, v)]) from node `start`.

    X0 has shape (n,) or (m, n); rows are independent directions.  Returns (N + 1, ...) with
    zeros before `start`.
    """
    v = _states(v_states)
    _check(v, Q, cfg)
    X = np.array(X0, dtype=float)
    out = np.zeros((cfg.N + 1,) + X.shape)
    out[start] = X
    decay = _decay(basis, cfg)
    dt = cfg.dt
    for i in range(start, cfg.N):
        J = basis.jacobian(v[i])
        step = X @ J.T
        if forcing:
            step = step + forcing * basis.apply_B(v[i], v[i])
        X = decay * (X - dt * Q.values[i] * step)
        out[i + 1] = X
    return out


def frechet_tangent(basis: SpectralBasis, traj, Q: GrowthPath, h, cfg: SolverConfig) -> TangentTrajectory:
    """Dv(t, f) h along the stored trajectory v(., f)."""
    h = np.asarray(h, dtype=float)
    basis._check(h)
    states = propagate_linear(basis, traj, Q, cfg, h)
    return TangentTrajectory(np.arange(cfg.N + 1) * cfg.dt, states, "frechet")


def malliavin_tangent(basis: SpectralBasis, traj, Q: GrowthPath, sigma: float, u: float,
                      cfg: SolverConfig) -> TangentTrajectory:
    """D_u v(t, f): zero for t <= u, then the linearized flow forced by sigma Q B(v, v)."""
    m = int(round(u / cfg.dt))
    if m < 0 or m > cfg.N or not math.isclose(m * cfg.dt, u, rel_tol=0, abs_tol=1e-12 * max(1.0, cfg.T)):
        raise ValueError(f"u = {u} is not a node of the time grid (dt = {cfg.dt})")
    states = propagate_linear(basis, traj, Q, cfg, np.zeros(basis.n), start=m, forcing=sigma)
    return TangentTrajectory(np.arange(cfg.N + 1) * cfg.dt, states, "malliavin", m * cfg.dt)


def malliavin_grid(basis: SpectralBasis, traj, Q: GrowthPath, sigma: float, M: int,
                   cfg: SolverConfig) -> MalliavinGrid:
    """D_u v on u_k = k T / M, k = 0..M-1, via D_u v(t) = psi(t) - Phi(t, u) psi(u).

    psi solves the forced linear equation from psi(0) = 0; Phi(t, u) psi(u) is a homogeneous
    propagation started at u.  All M homogeneous propagations advance together.
    """
    v = _states(traj)
    _check(v, Q, cfg)
    if M < 1 or cfg.N % M:
        raise ValueError(f"M = {M} must divide N = {cfg.N}")
    nodes = np.arange(M) * (cfg.N // M)
    decay = _decay(basis, cfg)
    dt = cfg.dt
    psi = np.zeros(basis.n)
    X = np.zeros((M, basis.n))  # follows psi until its start node, then evolves homogeneously
    out = np.zeros((M, cfg.N + 1, basis.n))
    for i in range(cfg.N):
        J = basis.jacobian(v[i])
        qdt = dt * Q.values[i]
        psi = decay * (psi - qdt * (J @ psi + sigma * basis.apply_B(v[i], v[i])))
        X = decay * (X - qdt * (X @ J.T))
        pending = nodes >= i + 1
        X[pending] = psi
        out[:, i + 1] = psi - X
    return MalliavinGrid(nodes, np.arange(cfg.N + 1) * dt, out)


def malliavin_grid_naive(basis: SpectralBasis, traj, Q: GrowthPath, sigma: float, M: int,
                         cfg: SolverConfig) -> MalliavinGrid:
    """One forced propagation per u; the reference for the psi/Phi recombination."""
    if M < 1 or cfg.N % M:
        raise ValueError(f"M = {M} must divide N = {cfg.N}")
    nodes = np.arange(M) * (cfg.N // M)
    out = np.stack([malliavin_tangent(basis, traj, Q, sigma, m * cfg.dt, cfg).states for m in nodes])
    return MalliavinGrid(nodes, np.arange(cfg.N + 1) * cfg.dt, out)


def directional_derivative(grid: MalliavinGrid, h) -> np.ndarray:
    """int D_u v(t) h(u) du for h constant on the fine cells, shape (N + 1, n).

    Node u_k carries the weight int_{u_{k-1}}^{u_k} h; with M = N this is exactly the chain
    rule of the discrete scheme under the shift W + eps int h.
    """
    h = np.asarray(h, dtype=float)
    N = grid.values.shape[1] - 1
    if h.shape != (N,):
        raise ValueError(f"step function needs {N} cell values")
    dt = grid.times[1] - grid.times[0]
    H = np.concatenate(([0.0], np.cumsum(h) * dt))
    nodes = grid.u_nodes
    weights = np.zeros(len(nodes))
    weights[1:] = H[nodes[1:]] - H[nodes[:-1]]
    return np.tensordot(weights, grid.values, axes=(0, 0))


def cameron_martin_fd(basis: SpectralBasis, f, path: WienerPath, sigma: float, h, eps: float,
                      cfg: SolverConfig) -> np.ndarray:
    """(v(W + eps int h) - v(W)) / eps, the finite-difference oracle for int D_u v h(u) du."""
    base = integrate_random_nse(basis, f, growth_process(path, sigma), cfg).states
    shifted = cameron_martin_shift(path, h, eps)
    moved = integrate_random_nse(basis, f, growth_process(shifted, sigma), cfg).states
    return (moved - base) / eps


def frechet_fd(basis: SpectralBasis, f, h, Q: GrowthPath, eps: float, cfg: SolverConfig) -> np.ndarray:
    """(v(f + eps h) - v(f)) / eps along the grid."""
    f = np.asarray(f, dtype=float)
    h = np.asarray(h, dtype=float)
    base = integrate_random_nse(basis, f, Q, cfg).states
    moved = integrate_random_nse(basis, f + eps * h, Q, cfg).states
    return (moved - base) / eps


def relative_gap(approx, exact) -> float:
    """sup_t |approx - exact|_H / sup_t |exact|_H."""
    scale = float(np.linalg.norm(exact, axis=-1).max())
    if scale == 0.0:
        return float(np.linalg.norm(approx, axis=-1).max())
    return float(np.linalg.norm(np.asarray(approx) - exact, axis=-1).max()) / scale


@dataclass(frozen=True)
class FrechetNormReport:
    sup_norm: float
    exponent_scale: float  # (1/2) |Q|_inf^2 |f|_H^2 / (2 nu)

    @property
    def c_tilde(self) -> float:
        """Smallest c with sup_t |Dv(t, f)| <= exp(c * exponent_scale)."""
        if self.sup_norm <= 1.0 or self.exponent_scale == 0.0:
            return 0.0
        return math.log(self.sup_norm) / self.exponent_scale


def frechet_norm_audit(basis: SpectralBasis, f, traj, Q: GrowthPath, cfg: SolverConfig,
                       hs=None) -> FrechetNormReport:
    """sup_t of the operator norm of Dv(t, f).

    Without `hs` the full fundamental matrix is propagated and its spectral norm taken,
    i.e. the supremum over all directions; with `hs` only those directions are sampled.
    """
    f = np.asarray(f, dtype=float)
    if hs is None:
        X = propagate_linear(basis, traj, Q, cfg, np.eye(basis.n))
        sup = max(float(np.linalg.norm(x, 2)) for x in X)
    else:
        hs = np.atleast_2d(np.asarray(hs, dtype=float))
        X = propagate_linear(basis, traj, Q, cfg, hs)
        sup = float((np.linalg.norm(X, axis=2) / np.linalg.norm(hs, axis=1)).max())
    if not math.isfinite(sup):
        raise FloatingPointError("non-finite Fréchet derivative norm")
    scale = 0.5 * Q.sup_norm ** 2 * float(np.dot(f, f)) / (2.0 * cfg.nu)
    return FrechetNormReport(sup, scale)


@dataclass(frozen=True)
class MalliavinMomentReport:
    lhs: np.ndarray  # per u
    rhs_unit: np.ndarray  # |D_u Q|_inf^2 |f|^4 exp(C |Q|_inf^2 |f|^2) per u
    C: float

    @property
    def C_nu(self) -> float:
        """Smallest C_nu making the bound hold for every u on the grid, given C."""
        mask = self.rhs_unit > 0
        if not np.any(self.lhs > 0):
            return 0.0
        if np.any(self.lhs[~mask] > 0):
            return math.inf
        return float((self.lhs[mask] / self.rhs_unit[mask]).max())


def malliavin_moment_audit(basis: SpectralBasis, grid: MalliavinGrid, f, Q: GrowthPath, sigma: float,
                           nu: float, C: float = 0.0) -> MalliavinMomentReport:
    """sup_{t >= u} |D_u v(t)|^2 + nu int |D_u v|_V^2 against C_nu |D_u Q|^2 |f|^4 exp(C |Q|^2 |f|^2)."""
    f2 = float(np.dot(f, f))
    dt = grid.times[1] - grid.times[0]
    D = grid.values
    lhs = (np.linalg.norm(D, axis=2) ** 2).max(axis=1) + nu * trapezoid(basis.v_norm(D) ** 2, dt, axis=1)
    dq = np.array([sigma * Q.values[m:].max() for m in grid.u_nodes])
    rhs = dq ** 2 * f2 ** 2 * math.exp(C * Q.sup_norm ** 2 * f2)
    return MalliavinMomentReport(lhs, rhs, C)
