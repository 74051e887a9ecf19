import json

import numpy as np
import pytest

from conftest import two_mode
from snse.galerkin import (InstabilityError, SolverConfig, Trajectory, energy_audit, flow_lipschitz_probe,
                           integrate_batch, integrate_random_nse, trapezoid, v_norm_audit)
from snse.wiener import growth_process, sample_path


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        SolverConfig(1.0, 1.0, 10, "rk4")
    assert SolverConfig(1.0, 2.0, 8).refined().dt == 0.125


def test_grid_mismatch(basis2):
    Q = growth_process(sample_path(1.0, 16, 0), 1.0)
    with pytest.raises(ValueError):
        integrate_random_nse(basis2, two_mode(basis2), Q, SolverConfig(1.0, 1.0, 32))


@pytest.mark.parametrize("scheme", ["exponential-euler", "imex-euler"])
def test_single_mode_decay(basis2, scheme):
    N = 64
    cfg = SolverConfig(0.5, 1.0, N, scheme)
    Q = growth_process(sample_path(1.0, N, 1), 1.0)
    i = basis2.mode_index(1, 1)
    traj = integrate_random_nse(basis2, 2.0 * basis2.unit(i), Q, cfg)
    rate = 0.5 * basis2.eigenvalues[i]
    if scheme == "exponential-euler":
        expected = 2.0 * np.exp(-rate * traj.times)
    else:
        expected = 2.0 / (1 + rate * cfg.dt) ** np.arange(N + 1)
    np.testing.assert_allclose(traj.states[:, i], expected, rtol=1e-12)


def test_batch_matches_single(basis2):
    cfg = SolverConfig(1.0, 1.0, 64)
    paths = [sample_path(1.0, 64, 0, k) for k in range(3)]
    Qv = np.array([np.exp(p.values) for p in paths])
    states, failed = integrate_batch(basis2, two_mode(basis2), Qv, cfg)
    assert not failed.any()
    for k, p in enumerate(paths):
        single = integrate_random_nse(basis2, two_mode(basis2), growth_process(p, 1.0), cfg).states
        np.testing.assert_allclose(states[k], single, rtol=0, atol=1e-14)


def test_blowup_guard(basis2):
    cfg = SolverConfig(1e-3, 1.0, 4)
    Q = growth_process(sample_path(1.0, 4, 0), 1.0)
    with pytest.raises(InstabilityError):
        integrate_random_nse(basis2, two_mode(basis2, 200.0), Q, cfg)


def test_energy_audit_two_mode(basis2):
    cfg = SolverConfig(0.5, 1.0, 512)
    f = two_mode(basis2, 2.0)
    Q = growth_process(sample_path(1.0, 512, 3), 1.0)
    traj = integrate_random_nse(basis2, f, Q, cfg)
    rep = energy_audit(basis2, traj, f, cfg.nu)
    assert rep.holds(5 * cfg.dt)
    assert rep.sup_h == pytest.approx(2.0)


def test_v_norm_audit_single_mode_closed_form(basis2):
    nu, T, N = 1.0, 1.0, 256
    f = basis2.unit(0)
    Q = growth_process(sample_path(T, N, 0), 1.0)
    traj = integrate_random_nse(basis2, f, Q, SolverConfig(nu, T, N))
    rep = v_norm_audit(basis2, traj, f, Q, nu)
    # mu = 1: |f|_V^2 + nu * int nu^2 e^{-2 nu t} dt
    exact = 1.0 + nu ** 2 * (1 - np.exp(-2 * nu * T)) / 2
    assert rep.lhs == pytest.approx(exact, rel=1e-4)
    assert np.isfinite(rep.c_min) and rep.c_min > 0


def test_lipschitz_probe(basis2):
    cfg = SolverConfig(1.0, 1.0, 128)
    Q = growth_process(sample_path(1.0, 128, 2), 1.0)
    f = two_mode(basis2)
    ratio = flow_lipschitz_probe(basis2, f, f + 1e-3 * basis2.unit(3), Q, cfg, radius=2.0)
    assert 0 < ratio <= 1.5
    with pytest.raises(ValueError):
        flow_lipschitz_probe(basis2, f, f, Q, cfg)
    with pytest.raises(ValueError):
        flow_lipschitz_probe(basis2, f, 5 * f, Q, cfg, radius=2.0)


def test_trapezoid():
    assert trapezoid(np.array([0.0, 1.0, 2.0]), 0.5) == pytest.approx(1.0)


def test_exports(basis2, tmp_path):
    cfg = SolverConfig(1.0, 1.0, 8)
    Q = growth_process(sample_path(1.0, 8, 0), 1.0)
    traj = integrate_random_nse(basis2, two_mode(basis2), Q, cfg)
    traj.to_csv(tmp_path / "t.csv")
    traj.to_ndjson(tmp_path / "t.ndjson")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,h_norm,v_norm,a_norm" and len(lines) == 10
    rec = json.loads((tmp_path / "t.ndjson").read_text().splitlines()[-1])
    assert np.array_equal(rec["coeffs"], traj.final)
    assert isinstance(traj, Trajectory)
