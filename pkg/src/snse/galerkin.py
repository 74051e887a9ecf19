"""Pathwise random Navier-Stokes equation dv = -A v dt - Q(t) B(v) dt on the Galerkin truncation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import SpectralBasis
from .wiener import GrowthPath

SCHEMES = ("exponential-euler", "imex-euler")
BLOWUP_FACTOR = 10.0


class InstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    T: float
    N: int
    scheme: str = "exponential-euler"

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("viscosity must be positive")
        if not self.T > 0 or int(self.N) != self.N or self.N < 1:
            raise ValueError("need T > 0 and a positive integer N")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def check_grid(self, Q: GrowthPath) -> None:
        if len(Q.values) != self.N + 1 or not math.isclose(Q.dt, self.dt, rel_tol=1e-12):
            raise ValueError(f"growth path grid ({len(Q.values) - 1} steps, dt={Q.dt}) "
                             f"does not match solver grid ({self.N} steps, dt={self.dt})")

    def refined(self, factor: int = 2) -> "SolverConfig":
        return SolverConfig(self.nu, self.T, self.N * factor, self.scheme)


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N + 1, n)
    norms: np.ndarray  # (N + 1, 3): |v|_H, |v|_V, |Av|_H

    @classmethod
    def from_states(cls, basis: SpectralBasis, times, states, nu: float) -> "Trajectory":
        states = np.asarray(states)
        norms = np.column_stack([basis.h_norm(states), basis.v_norm(states), basis.a_norm(states, nu)])
        return cls(np.asarray(times), states, norms)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "h_norm", "v_norm", "a_norm"])
            for t, (h, v, a) in zip(self.times, self.norms):
                w.writerow([repr(float(t)), repr(float(h)), repr(float(v)), repr(float(a))])

    def to_ndjson(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for t, c in zip(self.times, self.states):
                fh.write(json.dumps({"t": float(t), "coeffs": [float(x) for x in c]}) + "\n")


def integrate_batch(basis: SpectralBasis, F, Qvals, cfg: SolverConfig):
    """Integrate several initial data / growth paths at once.

    F is (P, n), Qvals is (P, N + 1).  Returns states (P, N + 1, n) and a boolean mask of
    paths that tripped the blow-up guard; their states are NaN from the failing step on.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Qvals = np.atleast_2d(np.asarray(Qvals, dtype=float))
    basis._check(F)
    if Qvals.shape[1] != cfg.N + 1:
        raise ValueError(f"growth values have {Qvals.shape[1] - 1} steps, solver grid has {cfg.N}")
    if not np.all(np.isfinite(F)):
        raise ValueError("initial data must be finite")
    P = max(F.shape[0], Qvals.shape[0])
    F = np.broadcast_to(F, (P, basis.n))
    Qvals = np.broadcast_to(Qvals, (P, cfg.N + 1))
    dt = cfg.dt
    if cfg.scheme == "exponential-euler":
        factor = np.exp(-cfg.nu * basis.eigenvalues * dt)
    else:
        factor = 1.0 / (1.0 + cfg.nu * basis.eigenvalues * dt)
    limit = BLOWUP_FACTOR * np.linalg.norm(F, axis=1)
    states = np.empty((P, cfg.N + 1, basis.n))
    states[:, 0] = F
    failed = np.zeros(P, dtype=bool)
    c = F.copy()
    for i in range(cfg.N):
        c = factor * (c - (dt * Qvals[:, i])[:, None] * basis.apply_B(c, c))
        bad = ~(np.linalg.norm(c, axis=1) <= limit)
        if bad.any():
            failed |= bad
            c[bad] = np.nan
        states[:, i + 1] = c
    return states, failed


def integrate_random_nse(basis: SpectralBasis, f, Q: GrowthPath, cfg: SolverConfig) -> Trajectory:
    """Exponential Euler: c+ = exp(-nu mu dt) * (c - dt Q(t) B(c, c)), Q frozen at the left node."""
    cfg.check_grid(Q)
    f = np.asarray(f, dtype=float)
    if f.ndim != 1:
        raise ValueError("integrate_random_nse takes one initial field; use integrate_batch")
    states, failed = integrate_batch(basis, f, Q.values, cfg)
    if failed[0]:
        raise InstabilityError("scheme instability (|v|_H > 10 |f|_H); reduce dt")
    return Trajectory.from_states(basis, np.arange(cfg.N + 1) * cfg.dt, states[0], cfg.nu)


def trapezoid(values, dt: float, axis: int = 0) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    first = np.take(values, 0, axis=axis)
    last = np.take(values, -1, axis=axis)
    return dt * (values.sum(axis=axis) - 0.5 * (first + last))


@dataclass(frozen=True)
class EnergyReport:
    dt: float
    f_h: float
    sup_h: float
    integral_v2: float
    integral_bound: float
    final_h: float = 0.0
    nu: float = 1.0

    @property
    def sup_excess(self) -> float:
        """Relative amount by which sup |v|_H exceeds |f|_H (negative when the bound holds)."""
        return self.sup_h / self.f_h - 1.0 if self.f_h > 0 else 0.0

    @property
    def integral_excess(self) -> float:
        return self.integral_v2 / self.integral_bound - 1.0 if self.integral_bound > 0 else 0.0

    @property
    def identity_defect(self) -> float:
        """| |v(T)|^2 + 2 nu int ||v||^2 - |f|^2 | / |f|^2; the continuous flow has zero defect."""
        if self.f_h == 0.0:
            return 0.0
        return abs(self.final_h ** 2 + 2 * self.nu * self.integral_v2 - self.f_h ** 2) / self.f_h ** 2

    def holds(self, rel_margin: float) -> bool:
        return (self.sup_h <= self.f_h * (1 + rel_margin)
                and self.integral_v2 <= self.integral_bound * (1 + rel_margin))


def energy_audit(basis: SpectralBasis, traj: Trajectory, f, nu: float) -> EnergyReport:
    f_h = float(basis.h_norm(f))
    dt = float(traj.times[1] - traj.times[0])
    return EnergyReport(dt, f_h, float(traj.norms[:, 0].max()),
                        float(trapezoid(traj.norms[:, 1] ** 2, dt)), f_h ** 2 / (2 * nu),
                        float(traj.norms[-1, 0]), float(nu))


@dataclass(frozen=True)
class VNormReport:
    lhs: float
    f_v2: float
    growth_scale: float  # |f|_H^4 sup Q^4

    @property
    def c_min(self) -> float:
        """Smallest c with lhs <= |f|_V^2 exp(c |f|_H^4 sup Q^4)."""
        if self.lhs <= self.f_v2 or self.f_v2 == 0.0:
            return 0.0
        return math.log(self.lhs / self.f_v2) / self.growth_scale


def v_norm_audit(basis: SpectralBasis, traj: Trajectory, f, Q: GrowthPath, nu: float) -> VNormReport:
    dt = float(traj.times[1] - traj.times[0])
    lhs = float((traj.norms[:, 1] ** 2).max() + nu * trapezoid(traj.norms[:, 2] ** 2, dt))
    f_h = float(basis.h_norm(f))
    return VNormReport(lhs, float(basis.v_norm(f)) ** 2, f_h ** 4 * Q.sup_norm ** 4)


def flow_lipschitz_probe(basis: SpectralBasis, f1, f2, Q: GrowthPath, cfg: SolverConfig,
                         radius: float | None = None) -> float:
    """sup_t |v(t, f1) - v(t, f2)|_H / |f1 - f2|_H."""
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    gap = float(np.linalg.norm(f1 - f2))
    if gap == 0.0:
        raise ValueError("f1 == f2: Lipschitz ratio undefined")
    if radius is not None and max(np.linalg.norm(f1), np.linalg.norm(f2)) > radius:
        raise ValueError(f"initial data outside the ball of radius {radius}")
    v1 = integrate_random_nse(basis, f1, Q, cfg).states
    v2 = integrate_random_nse(basis, f2, Q, cfg).states
    ratio = float(np.linalg.norm(v1 - v2, axis=1).max() / gap)
    if not math.isfinite(ratio):
        raise InstabilityError("non-finite Lipschitz ratio")
    return ratio
