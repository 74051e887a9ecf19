import numpy as np
import pytest

from conftest import two_mode
from snse.direct import integrate_snse_direct, transform_check, transform_errors
from snse.galerkin import SolverConfig
from snse.wiener import sample_path


def test_sigma_zero_gap_is_time_discretization(basis2):
    # both schemes solve the deterministic NSE; their gap is O(dt)
    gaps = []
    for N in (128, 256):
        cfg = SolverConfig(1.0, 1.0, N)
        gaps.append(transform_check(basis2, two_mode(basis2, 2.0), sample_path(1.0, N, 0), 0.0, cfg))
    assert gaps[1] < 10 * (1.0 / 256)
    assert 1.6 < gaps[0] / gaps[1] < 2.6


def test_single_mode_direct_is_heun_growth(basis2):
    N = 256
    p = sample_path(1.0, N, 1)
    f = basis2.unit(0)
    traj = integrate_snse_direct(basis2, f, p, 1.0, SolverConfig(1.0, 1.0, N))
    exact = np.exp(-traj.times + p.values)
    assert np.abs(traj.states[:, 0] - exact).max() < 5e-2


def test_transform_errors_batch_matches_single(basis2):
    cfg = SolverConfig(1.0, 1.0, 128)
    paths = [sample_path(1.0, 128, 5, k) for k in range(3)]
    f = two_mode(basis2)
    batch = transform_errors(basis2, f, paths, 0.5, cfg)
    single = [transform_check(basis2, f, p, 0.5, cfg) for p in paths]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_path_grid_mismatch(basis2):
    with pytest.raises(ValueError):
        integrate_snse_direct(basis2, two_mode(basis2), sample_path(1.0, 64, 0), 1.0, SolverConfig(1.0, 1.0, 32))


def test_single_mode_transform_study(basis2):
    # v is exact for one mode, so the gap is the Heun error in Q; RMS over 16 shared paths
    levels = [1024, 2048, 4096]
    fine = [sample_path(1.0, levels[-1], 2024, k) for k in range(16)]
    rms, worst = [], []
    for N in levels:
        err = transform_errors(basis2, basis2.unit(0), [p.coarsen(levels[-1] // N) for p in fine], 1.0,
                               SolverConfig(1.0, 1.0, N))
        rms.append(np.sqrt(np.mean(err ** 2)))
        worst.append(err.max())
    assert worst[-1] <= 1e-3
    for a, b in zip(rms, rms[1:]):
        assert 1.6 <= a / b <= 2.6
