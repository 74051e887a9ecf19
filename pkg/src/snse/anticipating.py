"""Anticipating initial data: u(t, Y) = v(t, Y) Q(t) for Y depending on the whole noise path.

Y is a cylindrical functional Y = sum_j phi_j(W(tau_1), ..., W(tau_m)) e_j with closed-form
partial derivatives, so D_s Y = sum_j sum_l d_l phi_j 1{s <= tau_l} e_j is exact and
piecewise constant in s.  The equation checked is

    u(t) = Y - int A u - int B(u) + sigma int u o dW,

with the Stratonovich integral assembled from a partition-based Skorohod estimate plus the
trace term int (D+ u + D- u)/2 ds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import sympy

from .basis import SpectralBasis
from .galerkin import SolverConfig, Trajectory, integrate_random_nse, trapezoid
from .tangent import MalliavinGrid, malliavin_grid, propagate_linear
from .wiener import GrowthPath, WienerPath, growth_process

_ALLOWED_FUNCS = (sympy.sin, sympy.cos, sympy.exp)


class ExpressionError(ValueError):
    pass


def _check_expr(expr: sympy.Expr, symbols) -> None:
    for node in sympy.preorder_traversal(expr):
        if node.is_Symbol:
            if node not in symbols:
                raise ExpressionError(f"unknown variable {node}; use w1..w{len(symbols)}")
        elif node.is_Number or node.is_NumberSymbol:
            if not node.is_real:
                raise ExpressionError(f"non-real constant {node}")
        elif isinstance(node, (sympy.Add, sympy.Mul)):
            continue
        elif isinstance(node, sympy.Pow):
            if not (node.exp.is_Integer and node.exp >= 0):
                raise ExpressionError(f"only nonnegative integer powers are supported, got {node}")
        elif isinstance(node, _ALLOWED_FUNCS):
            continue
        else:
            raise ExpressionError(f"unsupported expression {node!r} (allowed: polynomials, sin, cos, exp)")


class RandomInitialField:
    """Y = sum_j phi_j(W(tau_1), ..., W(tau_m)) e_j.

    `components` maps a mode index to an expression in w1..wm (w_l stands for W(tau_l)).
    With no times the field is deterministic.
    """

    def __init__(self, times: Sequence[float], components: Mapping[int, str], n: int):
        self.times = tuple(float(t) for t in times)
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ExpressionError("evaluation times must be strictly increasing")
        if any(t < 0 for t in self.times):
            raise ExpressionError("evaluation times must be nonnegative")
        self.n = int(n)
        self.symbols = sympy.symbols(f"w1:{len(self.times) + 1}") if self.times else ()
        self.sources = {int(j): str(e) for j, e in components.items()}
        self._phi = {}
        self._grad = {}
        self._free = {}
        for j, src in self.sources.items():
            if not 0 <= j < self.n:
                raise ExpressionError(f"mode index {j} outside basis of size {self.n}")
            try:
                expr = sympy.sympify(src, locals={str(s): s for s in self.symbols})
            except (sympy.SympifyError, SyntaxError, TypeError) as exc:
                raise ExpressionError(f"cannot parse {src!r}: {exc}") from None
            _check_expr(expr, self.symbols)
            self._free[j] = bool(expr.free_symbols)
            self._phi[j] = sympy.lambdify(self.symbols, expr, "math")
            self._grad[j] = [sympy.lambdify(self.symbols, sympy.diff(expr, s), "math") for s in self.symbols]

    @property
    def is_deterministic(self) -> bool:
        return not any(self._free[j] for j in self._free)

    def _args(self, path: WienerPath) -> list[float]:
        return [float(path.values[path.node(t)]) for t in self.times]

    def evaluate(self, path: WienerPath) -> np.ndarray:
        args = self._args(path)
        y = np.zeros(self.n)
        for j, phi in self._phi.items():
            y[j] = phi(*args)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("Y is not finite on this path")
        return y

    def partials(self, path: WienerPath) -> np.ndarray:
        """(m, n) array: row l is d Y / d W(tau_l)."""
        args = self._args(path)
        g = np.zeros((len(self.times), self.n))
        for j, grads in self._grad.items():
            for l, dphi in enumerate(grads):
                g[l, j] = dphi(*args)
        return g

    def malliavin(self, path: WienerPath, s: float) -> np.ndarray:
        """D_s Y, using 1{s <= tau_l}."""
        g = self.partials(path)
        active = np.array([s <= t + 1e-12 * max(1.0, path.horizon) for t in self.times], dtype=bool)
        return g[active].sum(axis=0) if active.any() else np.zeros(self.n)

    def segments(self, path: WienerPath) -> tuple[np.ndarray, np.ndarray]:
        """Per-node segment label and per-segment direction of D_s Y.

        Segment l covers nodes s with tau_{l-1} < s <= tau_l (tau_0 = -inf); nodes past the
        last tau get label -1 (D_s Y = 0).
        """
        g = self.partials(path)
        taus = [path.node(t) for t in self.times]
        label = np.full(path.n_steps + 1, -1, dtype=np.int64)
        lo = 0
        for l, hi in enumerate(taus):
            label[lo:hi + 1] = l
            lo = hi + 1
        directions = np.array([g[l:].sum(axis=0) for l in range(len(taus))]).reshape(len(taus), self.n)
        return label, directions


def evaluate_Y(Y: RandomInitialField, path: WienerPath) -> np.ndarray:
    return Y.evaluate(path)


def malliavin_Y(Y: RandomInitialField, path: WienerPath, s: float) -> np.ndarray:
    return Y.malliavin(path, s)


@dataclass(frozen=True, eq=False)
class AnticipatingRun:
    basis: SpectralBasis
    cfg: SolverConfig
    path: WienerPath
    sigma: float
    Q: GrowthPath
    Y: np.ndarray
    v: Trajectory
    u: np.ndarray  # (N + 1, n) = v * Q
    grid: MalliavinGrid | None
    seg_label: np.ndarray  # (N + 1,) segment of D_s Y at node s, -1 where D_s Y = 0
    seg_tangents: np.ndarray  # (S, N + 1, n): Dv(t, Y)(direction of segment)

    def frechet_DsY(self, s_idx: np.ndarray, t_idx) -> np.ndarray:
        """Dv(t, Y)(D_s Y) for node arrays s_idx and t_idx (broadcast)."""
        s_idx = np.asarray(s_idx)
        t_idx = np.broadcast_to(np.asarray(t_idx), s_idx.shape)
        out = np.zeros(s_idx.shape + (self.basis.n,))
        lab = self.seg_label[s_idx]
        ok = lab >= 0
        if ok.any():
            out[ok] = self.seg_tangents[lab[ok], t_idx[ok]]
        return out


def solve_anticipating(basis: SpectralBasis, Y: RandomInitialField, path: WienerPath, sigma: float,
                       cfg: SolverConfig, grid_M: int | None = None) -> AnticipatingRun:
    if path.n_steps != cfg.N or abs(path.horizon - cfg.T) > 1e-12 * cfg.T:
        raise ValueError("path grid does not match solver grid")
    if Y.n != basis.n:
        raise ValueError(f"Y has {Y.n} components, basis has {basis.n}")
    Q = growth_process(path, sigma)
    y = Y.evaluate(path)
    v = integrate_random_nse(basis, y, Q, cfg)
    u = v.states * Q.values[:, None]
    label, directions = Y.segments(path)
    if len(directions):
        tangents = propagate_linear(basis, v, Q, cfg, directions).transpose(1, 0, 2)
    else:
        tangents = np.zeros((0, cfg.N + 1, basis.n))
    if grid_M is None:
        grid_M = math.gcd(cfg.N, 16)
    grid = malliavin_grid(basis, v, Q, sigma, grid_M, cfg) if grid_M else None
    return AnticipatingRun(basis, cfg, path, float(sigma), Q, y, v, u, grid, label, tangents)


def uniform_partition(N: int, k: int, t_index: int | None = None) -> np.ndarray:
    """Nodes 0, k, 2k, ..., t_index of the fine grid."""
    t_index = N if t_index is None else t_index
    if k < 1 or t_index % k or not 0 < t_index <= N:
        raise ValueError(f"partition step {k} must divide the end node {t_index} (N = {N})")
    return np.arange(0, t_index + 1, k)


def _check_partition(run: AnticipatingRun, partition) -> np.ndarray:
    p = np.asarray(partition)
    if p.ndim != 1 or p.size < 2 or not np.issubdtype(p.dtype, np.integer):
        raise ValueError("partition must be an integer array of at least two grid nodes")
    if p[0] != 0 or np.any(np.diff(p) <= 0) or p[-1] > run.cfg.N:
        raise ValueError("partition must start at node 0 and increase strictly within the grid")
    return p


def ito_increments(path: WienerPath, Q: GrowthPath, sigma: float, scheme: str = "milstein") -> np.ndarray:
    """Per-step adapted approximations of int_{t_j}^{t_{j+1}} Q dW."""
    dw = path.increments
    q = Q.values[:-1]
    if scheme == "euler":
        return q * dw
    if scheme == "milstein":
        return q * (dw + 0.5 * sigma * (dw * dw - path.dt))
    raise ValueError(f"unknown Itô sum {scheme!r}")


def _cell_correction(run: AnticipatingRun, a: int, b: int) -> np.ndarray:
    """trapz over [t_a, t_b] of Dv(t_a, Y)(D_s Y) Q(s) ds."""
    s = np.arange(a, b + 1)
    vals = run.frechet_DsY(s, a) * run.Q.values[s, None]
    return trapezoid(vals, run.cfg.dt)


def skorohod_parts(run: AnticipatingRun, partition, ito: str = "milstein") -> tuple[np.ndarray, np.ndarray]:
    """(sum_i v(t_i, Y) int_{t_i}^{t_{i+1}} Q dW,  sum_i int_{t_i}^{t_{i+1}} Dv(t_i, Y)(D_s Y) Q(s) ds)."""
    p = _check_partition(run, partition)
    inc = np.concatenate(([0.0], np.cumsum(ito_increments(run.path, run.Q, run.sigma, ito))))
    cell_ito = inc[p[1:]] - inc[p[:-1]]
    forward = (run.v.states[p[:-1]] * cell_ito[:, None]).sum(axis=0)
    correction = np.zeros(run.basis.n)
    if run.seg_tangents.shape[0]:
        for a, b in zip(p[:-1], p[1:]):
            correction += _cell_correction(run, int(a), int(b))
    return forward, correction


def skorohod_integral(run: AnticipatingRun, partition, ito: str = "milstein") -> np.ndarray:
    """Step-process estimate of the Skorohod integral int_0^t u(s, Y) dW(s), t = partition[-1]."""
    forward, correction = skorohod_parts(run, partition, ito)
    return forward - correction


def one_sided(run: AnticipatingRun, s) -> tuple[np.ndarray, np.ndarray]:
    """(D- u, D+ u) at node(s) s: D- = Q Dv(s, Y)(D_s Y), D+ = D- + sigma u(s)."""
    s = np.asarray(s)
    minus = run.frechet_DsY(s, s) * run.Q.values[s, None]
    return minus, minus + run.sigma * run.u[s]


def nabla_u(run: AnticipatingRun, s) -> np.ndarray:
    """Average of the one-sided traces, (D+ u + D- u) / 2."""
    minus, plus = one_sided(run, s)
    return 0.5 * (plus + minus)


def stratonovich_integral(run: AnticipatingRun, partition, ito: str = "milstein") -> np.ndarray:
    """int_0^t u o dW = Skorohod integral + int_0^t (D+ u + D- u)/2 ds."""
    p = _check_partition(run, partition)
    s = np.arange(0, p[-1] + 1)
    return skorohod_integral(run, p, ito) + trapezoid(nabla_u(run, s), run.cfg.dt)


def _drift_integrals(run: AnticipatingRun, t: int) -> np.ndarray:
    u = run.u[: t + 1]
    au = run.basis.apply_A(u, run.cfg.nu)
    bu = run.basis.apply_B(u, u)
    return trapezoid(au + bu, run.cfg.dt)


@dataclass(frozen=True)
class Residual:
    t: float
    ito_form: float
    stratonovich_form: float
    without_correction: float
    scale: float  # sup_t |u(t)|_H


def residual_vectors(run: AnticipatingRun, partition, ito: str = "milstein") -> dict[str, np.ndarray]:
    p = _check_partition(run, partition)
    t = int(p[-1])
    dt = run.cfg.dt
    sig = run.sigma
    s = np.arange(0, t + 1)
    base = run.u[t] - run.Y + _drift_integrals(run, t)
    skor = skorohod_integral(run, p, ito)
    frechet_term = trapezoid(run.frechet_DsY(s, s) * run.Q.values[s, None], dt)
    half_u = 0.5 * sig * sig * trapezoid(run.u[s], dt)
    ito_form = base - sig * skor - half_u - sig * frechet_term
    strat_form = base - sig * stratonovich_integral(run, p, ito)
    return {"ito": ito_form, "stratonovich": strat_form, "ablated": base - sig * skor - half_u}


def residual_anticipating(run: AnticipatingRun, partition, ito: str = "milstein") -> Residual:
    """H-norm residuals of the anticipating equation at t = partition[-1]."""
    r = residual_vectors(run, partition, ito)
    t = int(partition[-1])
    return Residual(t * run.cfg.dt, float(np.linalg.norm(r["ito"])), float(np.linalg.norm(r["stratonovich"])),
                    float(np.linalg.norm(r["ablated"])), float(np.linalg.norm(run.u, axis=1).max()))


def residual_sweep(run: AnticipatingRun, k: int, fractions=(0.25, 0.5, 1.0), ito: str = "milstein") -> list[Residual]:
    N = run.cfg.N
    return [residual_anticipating(run, uniform_partition(N, k, int(round(fr * N))), ito) for fr in fractions]
