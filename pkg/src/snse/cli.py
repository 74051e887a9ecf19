"""Command-line experiment runner: `snse <subcommand> --config FILE [--seed S] [--out DIR]`.

Configs are JSON objects carrying ``"schema": "snse-experiment/1"``.  Every report starts
with the effective config (seed included), so a report file can itself be passed back as
``--config`` to replay the run.  Per-path jobs fan out over SNSE_WORKERS processes and are
merged in path order, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .anticipating import ExpressionError, RandomInitialField, one_sided, residual_sweep, solve_anticipating
from .basis import BasisError, audit_b_estimates, build_torus_basis, load_basis
from .direct import transform_errors
from .galerkin import InstabilityError, SCHEMES, SolverConfig, energy_audit, integrate_random_nse, v_norm_audit
from .tangent import (cameron_martin_fd, directional_derivative, frechet_fd, frechet_norm_audit,
                      frechet_tangent, malliavin_grid, relative_gap)
from .wiener import NoiseError, collapse_noise, growth_process, indicator, sample_path

SCHEMA = "snse-experiment/1"
COMMANDS = ("transform-check", "energy-audit", "malliavin-check", "anticipating-check",
            "convergence", "b-audit", "ensemble")
FAILURE_FRACTION = 0.10
WORKERS_ENV = "SNSE_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    schema: str = SCHEMA
    nu: float = 1.0
    sigma: float | None = None
    sigmas: list | None = None
    T: float = 1.0
    N: int = 1024
    K: int | None = 2
    basis_file: str | None = None
    scheme: str = "exponential-euler"
    n_paths: int = 1
    seed: int = 0
    f: list = field(default_factory=lambda: [{"mode": [0, 1, "cos"], "amp": 1.0}])
    Y: dict | None = None
    partition_factor: int = 8
    levels: list | None = None
    n_samples: int = 1000
    eps: float = 1e-3
    out: str = "out"

    @property
    def noise(self) -> float:
        """Collapsed noise intensity; a single sigma may be zero."""
        if self.sigmas is not None:
            return collapse_noise(self.sigmas)
        return float(self.sigma)

    def solver(self, N: int | None = None) -> SolverConfig:
        return SolverConfig(self.nu, self.T, self.N if N is None else N, self.scheme)

    def to_dict(self) -> dict:
        return asdict(self)

    def replay_dict(self) -> dict:
        """The config as embedded in reports; the output directory does not affect results."""
        d = asdict(self)
        del d["out"]
        return d


def _power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema") != SCHEMA:
        raise ConfigError(f"config schema must be {SCHEMA!r}, got {raw.get('schema')!r}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if raw.get("basis_file") is not None and "K" not in raw:
        raw = {**raw, "K": None}
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if (cfg.sigma is None) == (cfg.sigmas is None):
        raise ConfigError("give exactly one of sigma or sigmas")
    try:
        sigma = cfg.noise
    except NoiseError as exc:
        raise ConfigError(str(exc)) from None
    if not math.isfinite(sigma) or sigma < 0:
        raise ConfigError("sigma must be finite and nonnegative")
    if (cfg.K is None) == (cfg.basis_file is None):
        raise ConfigError("give exactly one of K or basis_file")
    for name in ("N", "n_paths", "partition_factor", "n_samples", "seed"):
        if not isinstance(getattr(cfg, name), int) or isinstance(getattr(cfg, name), bool):
            raise ConfigError(f"{name} must be an integer")
    if cfg.n_paths < 1 or cfg.n_samples < 1 or cfg.seed < 0:
        raise ConfigError("n_paths and n_samples must be positive, seed nonnegative")
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")
    if not (cfg.nu > 0 and cfg.T > 0 and cfg.N >= 1 and cfg.eps > 0):
        raise ConfigError("need nu > 0, T > 0, N >= 1, eps > 0")
    if cfg.N % cfg.partition_factor:
        raise ConfigError(f"partition factor {cfg.partition_factor} must divide N = {cfg.N}")
    if cfg.levels is not None:
        if not cfg.levels or not all(isinstance(n, int) and _power_of_two(n) for n in cfg.levels):
            raise ConfigError("refinement levels must be powers of two")
        if sorted(set(cfg.levels)) != list(cfg.levels):
            raise ConfigError("refinement levels must be strictly increasing")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a JSON config, or the embedded config of an NDJSON/CSV report."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    first = text.split("\n", 1)[0]
    try:
        if first.startswith("# config: "):
            raw = json.loads(first[len("# config: "):])
        else:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError:
                raw = json.loads(first)
            if isinstance(raw, dict) and raw.get("kind") == "config":
                raw = raw["config"]
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw)


# -- shared builders -----------------------------------------------------------------

@lru_cache(maxsize=4)
def _basis(K: int | None, basis_file: str | None):
    return build_torus_basis(K) if basis_file is None else load_basis(basis_file)


def get_basis(cfg: ExperimentConfig):
    try:
        return _basis(cfg.K, cfg.basis_file)
    except (BasisError, OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"basis: {exc}") from None


def _mode_of(basis, spec: dict) -> int:
    if "index" in spec:
        i = spec["index"]
        if not isinstance(i, int) or not 0 <= i < basis.n:
            raise ConfigError(f"mode index {i!r} out of range for {basis.n} modes")
        return i
    if "mode" in spec:
        k1, k2, *phase = spec["mode"]
        try:
            return basis.mode_index(int(k1), int(k2), phase[0] if phase else "cos")
        except (ValueError, BasisError):
            raise ConfigError(f"mode {spec['mode']!r} is not in the basis") from None
    raise ConfigError("mode entries need 'index' or 'mode'")


def initial_field(basis, cfg: ExperimentConfig) -> np.ndarray:
    f = np.zeros(basis.n)
    if not isinstance(cfg.f, list):
        raise ConfigError("f must be a list of {mode|index, amp}")
    for spec in cfg.f:
        f[_mode_of(basis, spec)] += float(spec.get("amp", 1.0))
    return f


def random_field(basis, cfg: ExperimentConfig) -> RandomInitialField:
    spec = cfg.Y
    if not isinstance(spec, dict) or "components" not in spec:
        raise ConfigError("anticipating-check needs Y = {times, components: [{mode|index, expr}]}")
    comps = {}
    for c in spec["components"]:
        j = _mode_of(basis, c)
        if j in comps:
            raise ConfigError(f"mode {j} given twice in Y")
        comps[j] = str(c["expr"])
    times = spec.get("times", [])
    if any(not 0 <= t <= cfg.T for t in times):
        raise ConfigError("Y evaluation times must lie in [0, T]")
    try:
        return RandomInitialField(times, comps, basis.n)
    except ExpressionError as exc:
        raise ConfigError(f"Y: {exc}") from None


def _path(cfg: ExperimentConfig, index: int, N: int | None = None):
    return sample_path(cfg.T, cfg.N if N is None else N, cfg.seed, index)


# -- per-path jobs -------------------------------------------------------------------

def _job_transform(cfg: ExperimentConfig, index: int) -> dict:
    basis = get_basis(cfg)
    err = transform_errors(basis, initial_field(basis, cfg), [_path(cfg, index)], cfg.noise, cfg.solver())[0]
    if not math.isfinite(err):
        raise InstabilityError("scheme blow-up")
    return {"sup_error": float(err)}


def _job_energy(cfg: ExperimentConfig, index: int) -> dict:
    basis = get_basis(cfg)
    f = initial_field(basis, cfg)
    Q = growth_process(_path(cfg, index), cfg.noise)
    traj = integrate_random_nse(basis, f, Q, cfg.solver())
    e = energy_audit(basis, traj, f, cfg.nu)
    vn = v_norm_audit(basis, traj, f, Q, cfg.nu)
    return {"sup_h": e.sup_h, "f_h": e.f_h, "integral_v2": e.integral_v2, "integral_bound": e.integral_bound,
            "sup_excess": e.sup_excess, "integral_excess": e.integral_excess, "holds_5dt": e.holds(5 * e.dt),
            "v_lhs": vn.lhs, "v_c_min": vn.c_min}


def _job_malliavin(cfg: ExperimentConfig, index: int) -> dict:
    basis = get_basis(cfg)
    f = initial_field(basis, cfg)
    path = _path(cfg, index)
    sigma = cfg.noise
    solver = cfg.solver()
    Q = growth_process(path, sigma)
    traj = integrate_random_nse(basis, f, Q, solver)
    grid = malliavin_grid(basis, traj, Q, sigma, cfg.N, solver)
    T = cfg.T
    out = {}
    for name, (a, b) in {"h1": (0.0, T / 2), "h2": (T / 4, 3 * T / 4), "h3": (T / 2, T)}.items():
        h = indicator(path, a, b)
        exact = directional_derivative(grid, h)
        gaps = [relative_gap(cameron_martin_fd(basis, f, path, sigma, h, e, solver), exact)
                for e in (cfg.eps, cfg.eps / 10)]
        out[f"cm_gap_{name}"] = gaps[0]
        out[f"richardson_{name}"] = gaps[0] / gaps[1] if gaps[1] > 0 else math.inf
    # D_u v(t) vanishes for t <= u
    lower = np.tril(np.ones((cfg.N, cfg.N + 1), dtype=bool))
    out["adaptedness_max"] = float(np.abs(grid.values[lower]).max())
    h = np.ones(basis.n) / math.sqrt(basis.n)
    exact = frechet_tangent(basis, traj, Q, h, solver).states
    out["frechet_gap"] = relative_gap(frechet_fd(basis, f, h, Q, cfg.eps / 10, solver), exact)
    report = frechet_norm_audit(basis, f, traj, Q, solver)
    out["frechet_sup_norm"] = report.sup_norm
    out["c_tilde"] = report.c_tilde
    return out


def _job_anticipating(cfg: ExperimentConfig, index: int) -> dict:
    basis = get_basis(cfg)
    Y = random_field(basis, cfg)
    run = solve_anticipating(basis, Y, _path(cfg, index), cfg.noise, cfg.solver(), grid_M=0)
    sweep = residual_sweep(run, cfg.partition_factor)
    s = np.arange(cfg.N + 1)
    minus, plus = one_sided(run, s)
    trace_gap = float(np.abs(plus - minus - run.sigma * run.u).max())
    return {"residuals": [asdict(r) for r in sweep], "trace_gap": trace_gap}


def _job_ensemble(cfg: ExperimentConfig, index: int) -> dict:
    basis = get_basis(cfg)
    f = initial_field(basis, cfg)
    Q = growth_process(_path(cfg, index), cfg.noise)
    traj = integrate_random_nse(basis, f, Q, cfg.solver())
    return {"sup_Q": Q.sup_norm, "final_h": float(traj.norms[-1, 0]), "sup_h": float(traj.norms[:, 0].max()),
            "final_u_h": float(traj.norms[-1, 0] * Q.values[-1])}


JOBS = {"transform-check": _job_transform, "energy-audit": _job_energy, "malliavin-check": _job_malliavin,
        "anticipating-check": _job_anticipating, "ensemble": _job_ensemble}


def _guarded(args) -> dict:
    job, cfg, index = args
    try:
        return {"path": index, "status": "ok", **JOBS[job](cfg, index)}
    except (InstabilityError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return {"path": index, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def run_paths(job: str, cfg: ExperimentConfig) -> list[dict]:
    tasks = [(job, cfg, i) for i in range(cfg.n_paths)]
    workers = min(worker_count(), cfg.n_paths)
    if workers == 1:
        return [_guarded(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_guarded, tasks))  # map keeps path order


# -- reports -------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


@dataclass
class Report:
    command: str
    cfg: ExperimentConfig
    records: list = field(default_factory=list)
    header: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def write(self, out: Path) -> tuple[Path, Path]:
        out.mkdir(parents=True, exist_ok=True)
        config_line = {"kind": "config", "command": self.command, "version": __version__,
                       "config": self.cfg.replay_dict()}
        nd = out / f"{self.command}.ndjson"
        with open(nd, "w") as fh:
            for rec in [config_line] + self.records:
                fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
        buf = io.StringIO()
        buf.write("# config: " + json.dumps(_jsonable(self.cfg.replay_dict()), sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([_fmt(x) for x in row])
        cs = out / f"{self.command}.csv"
        cs.write_text(buf.getvalue())
        return nd, cs


def _path_report(command: str, cfg: ExperimentConfig, results: list[dict], columns: list[str]) -> Report:
    rep = Report(command, cfg, [{"kind": "path", **r} for r in results], ["path", "status"] + columns)
    for r in results:
        rep.rows.append([r["path"], r["status"]] + [r.get(c, "") for c in columns])
    return rep


def cmd_transform(cfg):
    res = run_paths("transform-check", cfg)
    return _path_report("transform-check", cfg, res, ["sup_error"]), res


def cmd_energy(cfg):
    res = run_paths("energy-audit", cfg)
    cols = ["sup_h", "f_h", "integral_v2", "integral_bound", "sup_excess", "integral_excess", "holds_5dt", "v_c_min"]
    return _path_report("energy-audit", cfg, res, cols), res


def cmd_malliavin(cfg):
    res = run_paths("malliavin-check", cfg)
    cols = ["cm_gap_h1", "cm_gap_h2", "cm_gap_h3", "richardson_h1", "richardson_h2", "richardson_h3",
            "adaptedness_max", "frechet_gap", "frechet_sup_norm", "c_tilde"]
    return _path_report("malliavin-check", cfg, res, cols), res


def cmd_anticipating(cfg):
    random_field(get_basis(cfg), cfg)  # surface Y errors before any work
    res = run_paths("anticipating-check", cfg)
    rep = Report("anticipating-check", cfg, [{"kind": "path", **r} for r in res],
                 ["path", "status", "t", "ito_form", "stratonovich_form", "without_correction", "scale", "trace_gap"])
    for r in res:
        if r["status"] != "ok":
            rep.rows.append([r["path"], r["status"], "", "", "", "", "", ""])
            continue
        for x in r["residuals"]:
            rep.rows.append([r["path"], "ok", x["t"], x["ito_form"], x["stratonovich_form"],
                             x["without_correction"], x["scale"], r["trace_gap"]])
    return rep, res


def cmd_ensemble(cfg):
    res = run_paths("ensemble", cfg)
    rep = _path_report("ensemble", cfg, res, ["sup_Q", "final_h", "sup_h", "final_u_h"])
    ok = [r for r in res if r["status"] == "ok"]
    summary = {"kind": "summary", "n_ok": len(ok)}
    for key in ("sup_Q", "final_h", "sup_h", "final_u_h"):
        vals = np.array([r[key] for r in ok])
        if len(vals):
            summary[f"mean_{key}"] = float(vals.mean())
            summary[f"std_{key}"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    rep.records.append(summary)
    return rep, res


def empirical_order(levels, errors) -> float:
    """Least-squares slope of -log2(error) against log2(N)."""
    x = np.log2(np.asarray(levels, dtype=float))
    y = np.log2(np.asarray(errors, dtype=float))
    return float(-np.polyfit(x, y, 1)[0])


def cmd_convergence(cfg):
    """Transform-check errors across N levels, all levels sharing each path's finest sample."""
    levels = cfg.levels or [2 ** p for p in range(10, 14)]
    basis = get_basis(cfg)
    f = initial_field(basis, cfg)
    fine = [_path(cfg, i, levels[-1]) for i in range(cfg.n_paths)]
    table = np.empty((len(levels), cfg.n_paths))
    for li, N in enumerate(levels):
        paths = [p.coarsen(levels[-1] // N) for p in fine]
        table[li] = transform_errors(basis, f, paths, cfg.noise, cfg.solver(N))
    failed = ~np.all(np.isfinite(table), axis=0)
    ok = table[:, ~failed]
    rms = np.sqrt((ok ** 2).mean(axis=1)) if ok.size else np.full(len(levels), np.nan)
    worst = ok.max(axis=1) if ok.size else np.full(len(levels), np.nan)
    order = empirical_order(levels, rms) if ok.size and np.all(rms > 0) else float("nan")
    rep = Report("convergence", cfg, header=["N", "rms_error", "max_error", "ratio"])
    for li, N in enumerate(levels):
        ratio = rms[li - 1] / rms[li] if li else ""
        rep.rows.append([N, rms[li], worst[li], ratio])
        rep.records.append({"kind": "level", "N": N, "errors": [float(e) for e in table[li]]})
    rep.records.append({"kind": "summary", "order": order, "failed_paths": np.flatnonzero(failed).tolist()})
    res = [{"path": i, "status": "failed" if failed[i] else "ok"} for i in range(cfg.n_paths)]
    return rep, res


def cmd_b_audit(cfg):
    basis = get_basis(cfg)
    r = audit_b_estimates(basis, cfg.n_samples, cfg.seed, cfg.nu)
    rep = Report("b-audit", cfg, [{"kind": "audit", **asdict(r)}], ["estimate", "max_ratio"])
    for name, value in r.max_ratio.items():
        rep.rows.append([name, value])
    ok = all(math.isfinite(v) for v in r.max_ratio.values())
    return rep, [{"path": 0, "status": "ok" if ok else "failed"}]


COMMAND_TABLE = {"transform-check": cmd_transform, "energy-audit": cmd_energy, "malliavin-check": cmd_malliavin,
                 "anticipating-check": cmd_anticipating, "convergence": cmd_convergence, "b-audit": cmd_b_audit,
                 "ensemble": cmd_ensemble}


def run_experiment(command: str, cfg: ExperimentConfig, out: Path) -> int:
    report, results = COMMAND_TABLE[command](cfg)
    report.write(out)
    failed = sum(r["status"] != "ok" for r in results)
    return EXIT_NUMERICAL if failed > FAILURE_FRACTION * len(results) else EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snse", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config, or a report to replay")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config 'out')")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"kind": "error", "type": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.out is not None:
            updates["out"] = args.out
        if updates:
            cfg = parse_config({**cfg.to_dict(), **updates})
        return run_experiment(args.command, cfg, Path(cfg.out))
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except (InstabilityError, FloatingPointError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERICAL)


if __name__ == "__main__":
    sys.exit(main())
