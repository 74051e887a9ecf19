"""Reference Stratonovich integrator for du = [-A u - B(u)] dt + sigma u o dW.

Used only for deterministic (adapted) initial data, to check u = v Q.
"""

from __future__ import annotations

import numpy as np

from .basis import SpectralBasis
from .galerkin import BLOWUP_FACTOR, InstabilityError, SolverConfig, Trajectory, integrate_batch, integrate_random_nse
from .wiener import WienerPath, growth_process


def _check_path(path: WienerPath, cfg: SolverConfig) -> None:
    if path.n_steps != cfg.N or abs(path.horizon - cfg.T) > 1e-12 * cfg.T:
        raise ValueError(f"path grid ({path.n_steps}, T={path.horizon}) does not match solver grid ({cfg.N}, T={cfg.T})")


def direct_batch(basis: SpectralBasis, F, W, sigma: float, cfg: SolverConfig):
    """Stochastic Heun over a batch: F is (P, n), W is (P, N + 1) path values.

    Returns states (P, N + 1, n) and the mask of paths that tripped the blow-up guard.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    basis._check(F)
    if W.shape[1] != cfg.N + 1:
        raise ValueError(f"path values have {W.shape[1] - 1} steps, solver grid has {cfg.N}")
    P = max(F.shape[0], W.shape[0])
    F = np.broadcast_to(F, (P, basis.n))
    dw = np.broadcast_to(np.diff(W, axis=1), (P, cfg.N))
    dt = cfg.dt
    nu_mu = cfg.nu * basis.eigenvalues

    def drift(u):
        return -nu_mu * u - basis.apply_B(u, u)

    # |u(t)|_H <= |f|_H Q(t)
    limit = BLOWUP_FACTOR * np.linalg.norm(F, axis=1) * np.exp(sigma * W).max(axis=1)
    states = np.empty((P, cfg.N + 1, basis.n))
    states[:, 0] = F
    failed = np.zeros(P, dtype=bool)
    u = F.copy()
    for i in range(cfg.N):
        d = dw[:, i, None]
        a0 = drift(u)
        pred = u + a0 * dt + sigma * u * d
        u = u + 0.5 * (a0 + drift(pred)) * dt + 0.5 * sigma * (u + pred) * d
        bad = ~(np.linalg.norm(u, axis=1) <= limit)
        if bad.any():
            failed |= bad
            u[bad] = np.nan
        states[:, i + 1] = u
    return states, failed


def integrate_snse_direct(basis: SpectralBasis, f, path: WienerPath, sigma: float, cfg: SolverConfig) -> Trajectory:
    """Stochastic Heun (predictor-corrector, trapezoidal in both drift and noise)."""
    _check_path(path, cfg)
    states, failed = direct_batch(basis, f, path.values, sigma, cfg)
    if failed[0]:
        raise InstabilityError("direct scheme instability; reduce dt")
    return Trajectory.from_states(basis, path.times, states[0], cfg.nu)


def transform_errors(basis: SpectralBasis, F, paths, sigma: float, cfg: SolverConfig) -> np.ndarray:
    """Per-path sup_i |u_direct(t_i) - v(t_i) Q(t_i)|_H for a batch of paths (NaN where a scheme failed)."""
    for p in paths:
        _check_path(p, cfg)
    W = np.array([p.values for p in paths])
    Qv = np.exp(sigma * W)
    v, fv = integrate_batch(basis, F, Qv, cfg)
    u, fu = direct_batch(basis, F, W, sigma, cfg)
    err = np.linalg.norm(u - v * Qv[:, :, None], axis=2).max(axis=1)
    err[fv | fu] = np.nan
    return err


def transform_check(basis: SpectralBasis, f, path: WienerPath, sigma: float, cfg: SolverConfig) -> float:
    """sup_i |u_direct(t_i) - v(t_i) Q(t_i)|_H."""
    Q = growth_process(path, sigma)
    v = integrate_random_nse(basis, f, Q, cfg).states
    u = integrate_snse_direct(basis, f, path, sigma, cfg).states
    return float(np.linalg.norm(u - v * Q.values[:, None], axis=1).max())
