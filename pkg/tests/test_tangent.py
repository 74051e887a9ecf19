import numpy as np
import pytest

from conftest import two_mode
from snse.galerkin import SolverConfig, integrate_random_nse
from snse.tangent import (cameron_martin_fd, directional_derivative, frechet_fd, frechet_norm_audit,
                          frechet_tangent, malliavin_grid, malliavin_grid_naive, malliavin_moment_audit,
                          malliavin_tangent, relative_gap)
from snse.wiener import growth_process, indicator, sample_path

N = 128


@pytest.fixture(scope="module")
def setup(basis2):
    cfg = SolverConfig(1.0, 1.0, N)
    path = sample_path(1.0, N, 11)
    Q = growth_process(path, 1.0)
    f = two_mode(basis2, 2.0)
    traj = integrate_random_nse(basis2, f, Q, cfg)
    return cfg, path, Q, f, traj


def test_malliavin_tangent_zero_before_u(basis2, setup):
    cfg, path, Q, f, traj = setup
    tan = malliavin_tangent(basis2, traj, Q, 1.0, 0.5, cfg)
    assert np.all(tan.states[: N // 2 + 1] == 0.0)
    assert np.linalg.norm(tan.states[-1]) > 0
    with pytest.raises(ValueError):
        malliavin_tangent(basis2, traj, Q, 1.0, 0.3001, cfg)


def test_grid_recombination_matches_naive(basis2, setup):
    cfg, path, Q, f, traj = setup
    fast = malliavin_grid(basis2, traj, Q, 1.0, 16, cfg)
    slow = malliavin_grid_naive(basis2, traj, Q, 1.0, 16, cfg)
    assert np.abs(fast.values - slow.values).max() <= 1e-12


def test_grid_divisibility(basis2, setup):
    cfg, path, Q, f, traj = setup
    with pytest.raises(ValueError):
        malliavin_grid(basis2, traj, Q, 1.0, 3, cfg)


def test_directional_derivative_matches_cameron_martin(basis2, setup):
    cfg, path, Q, f, traj = setup
    grid = malliavin_grid(basis2, traj, Q, 1.0, N, cfg)
    h = indicator(path, 0.25, 0.75)
    exact = directional_derivative(grid, h)
    assert relative_gap(cameron_martin_fd(basis2, f, path, 1.0, h, 1e-4, cfg), exact) < 1e-4


def test_frechet_linear_and_matches_fd(basis2, setup):
    cfg, path, Q, f, traj = setup
    rng = np.random.default_rng(0)
    h1, h2 = rng.standard_normal((2, basis2.n))
    t1 = frechet_tangent(basis2, traj, Q, h1, cfg).states
    t2 = frechet_tangent(basis2, traj, Q, h2, cfg).states
    t12 = frechet_tangent(basis2, traj, Q, 2 * h1 - 3 * h2, cfg).states
    np.testing.assert_allclose(t12, 2 * t1 - 3 * t2, atol=1e-12)
    assert relative_gap(frechet_fd(basis2, f, h1, Q, 1e-5, cfg), t1) < 1e-4


def test_frechet_energy_neutral_along_flow(basis2, setup):
    cfg, path, Q, f, traj = setup
    eta = frechet_tangent(basis2, traj, Q, basis2.unit(3), cfg).states
    vals = [basis2.b_form(eta[i], traj.states[i], traj.states[i]) for i in range(0, N, 16)]
    assert np.abs(vals).max() < 1e-13


def test_frechet_norm_audit_viscous_contracts(basis2, setup):
    cfg, path, Q, f, traj = setup
    rep = frechet_norm_audit(basis2, f, traj, Q, cfg)
    assert rep.sup_norm == pytest.approx(1.0)
    assert rep.c_tilde == 0.0


def test_moment_audit_finite(basis2, setup):
    cfg, path, Q, f, traj = setup
    grid = malliavin_grid(basis2, traj, Q, 1.0, 8, cfg)
    rep = malliavin_moment_audit(basis2, grid, f, Q, 1.0, cfg.nu)
    assert np.isfinite(rep.C_nu) and rep.C_nu > 0
    assert np.all(rep.lhs <= rep.C_nu * rep.rhs_unit * (1 + 1e-12))


def test_grid_csv(basis2, setup, tmp_path):
    cfg, path, Q, f, traj = setup
    grid = malliavin_grid(basis2, traj, Q, 1.0, 4, cfg)
    grid.to_csv(tmp_path / "g.csv")
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 1 + 4 * (N + 1)
