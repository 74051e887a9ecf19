"""Brownian driving paths, the growth process Q = exp(sigma W), and Wiener-space shifts.

Several independent noises sum_k sigma_k W_k are collapsed into one Brownian
motion with intensity sigma = sqrt(sum sigma_k^2); everything downstream works
with that scalar model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    sigmas: tuple[float, ...]
    collapsed_sigma: float = field(init=False)

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not all(math.isfinite(s) for s in sig):
            raise NoiseError("noise intensities must be finite")
        object.__setattr__(self, "sigmas", sig)
        object.__setattr__(self, "collapsed_sigma", math.sqrt(math.fsum(s * s for s in sig)))


def collapse_noise(spec: NoiseSpec | Sequence[float]) -> float:
    """Root-sum-square intensity of the single equivalent Brownian motion."""
    if not isinstance(spec, NoiseSpec):
        spec = NoiseSpec(tuple(spec))
    if not spec.sigmas or all(s == 0.0 for s in spec.sigmas):
        raise NoiseError("degenerate noise: all intensities vanish (use sigma=0 explicitly)")
    return spec.collapsed_sigma


def _generator(seed: int, index: int) -> np.random.Generator:
    # Philox is counter based; (seed, index) keys make ensembles order independent.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


@dataclass(frozen=True, eq=False)
class WienerPath:
    horizon: float
    n_steps: int
    values: np.ndarray
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.n_steps + 1,):
            raise ValueError(f"expected {self.n_steps + 1} path values, got {vals.shape}")
        if vals[0] != 0.0:
            raise ValueError("a Wiener path must start at 0")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    def coarsen(self, factor: int) -> "WienerPath":
        """Subsample every `factor`-th node; the result lies on the same Brownian path."""
        if factor < 1 or self.n_steps % factor:
            raise ValueError(f"coarsening factor {factor} does not divide {self.n_steps}")
        return WienerPath(self.horizon, self.n_steps // factor, self.values[::factor].copy(),
                          self.seed, self.index)

    def node(self, t: float) -> int:
        """Index of the grid node at time t; raises if t is off the grid."""
        i = int(round(t / self.dt))
        if i < 0 or i > self.n_steps or not math.isclose(i * self.dt, t, rel_tol=0, abs_tol=1e-12 * max(1.0, self.horizon)):
            raise ValueError(f"time {t} is not a node of the grid (dt={self.dt})")
        return i

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "W"])
            for t, x in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(x))])

    @classmethod
    def from_csv(cls, path: str | Path, seed: int = 0, index: int = 0) -> "WienerPath":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = np.array([float(r["t"]) for r in rows])
        w = np.array([float(r["W"]) for r in rows])
        n = len(t) - 1
        if n < 1:
            raise ValueError("path file needs at least two rows")
        if not np.allclose(np.diff(t), t[-1] / n, rtol=1e-9, atol=0):
            raise ValueError("path file grid is not uniform")
        return cls(float(t[-1]), n, w, seed, index)


def sample_path(T: float, N: int, seed: int, index: int = 0) -> WienerPath:
    """Brownian path on the uniform grid t_i = i T / N, reproducible from (seed, index)."""
    if not T > 0:
        raise ValueError("horizon T must be positive")
    if int(N) != N or N < 1:
        raise ValueError("number of steps N must be a positive integer")
    N = int(N)
    dw = math.sqrt(T / N) * _generator(seed, index).standard_normal(N)
    values = np.concatenate(([0.0], np.cumsum(dw)))
    return WienerPath(float(T), N, values, int(seed), int(index))


@dataclass(frozen=True, eq=False)
class GrowthPath:
    values: np.ndarray
    sigma: float
    dt: float

    @property
    def sup_norm(self) -> float:
        return float(self.values.max())


def growth_process(path: WienerPath, sigma: float) -> GrowthPath:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    q = np.exp(sigma * path.values)
    q.setflags(write=False)
    return GrowthPath(q, float(sigma), path.dt)


def heun_growth(path: WienerPath, sigma: float) -> np.ndarray:
    """Stratonovich Heun integration of dQ = sigma Q o dW, Q(0) = 1 (oracle for growth_process)."""
    dw = path.increments
    q = np.empty(path.n_steps + 1)
    q[0] = 1.0
    for i, d in enumerate(dw):
        pred = q[i] + sigma * q[i] * d
        q[i + 1] = q[i] + 0.5 * sigma * (q[i] + pred) * d
    return q


def cameron_martin_shift(path: WienerPath, h, eps: float) -> WienerPath:
    """Shifted path W + eps * int_0^t h, for h constant on grid cells.

    `h` holds one value per cell [t_j, t_{j+1}).
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (path.n_steps,):
        raise ValueError(f"step function needs {path.n_steps} cell values, got {h.shape}")
    shift = np.concatenate(([0.0], np.cumsum(h) * path.dt))
    return WienerPath(path.horizon, path.n_steps, path.values + eps * shift, path.seed, path.index)


def indicator(path: WienerPath, a: float, b: float) -> np.ndarray:
    """Cell values of the indicator of [a, b) on the grid of `path`."""
    left = path.times[:-1]
    return ((left >= a - 1e-12 * path.dt) & (left < b - 1e-12 * path.dt)).astype(float)


def malliavin_Q(Q: GrowthPath, sigma: float, u: float, t: float) -> float:
    """D_u Q(t) = sigma Q(t) when u <= t, zero otherwise."""
    horizon = Q.dt * (len(Q.values) - 1)
    tol = 1e-12 * max(1.0, horizon)
    if not (-tol <= u <= horizon + tol and -tol <= t <= horizon + tol):
        raise ValueError(f"times ({u}, {t}) outside [0, {horizon}]")
    if u > t + tol:
        return 0.0
    i = int(round(t / Q.dt))
    if not math.isclose(i * Q.dt, t, abs_tol=tol):
        raise ValueError(f"time {t} is not a grid node")
    return sigma * float(Q.values[i])
