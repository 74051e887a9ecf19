import math

import numpy as np
import pytest

from snse.anticipating import (ExpressionError, RandomInitialField, ito_increments, nabla_u, one_sided,
                               residual_anticipating, residual_sweep, skorohod_parts, solve_anticipating,
                               stratonovich_integral, uniform_partition)
from snse.galerkin import SolverConfig
from snse.wiener import growth_process, sample_path

N = 256


def test_expression_whitelist():
    with pytest.raises(ExpressionError):
        RandomInitialField([1.0], {0: "log(w1)"}, 4)
    with pytest.raises(ExpressionError):
        RandomInitialField([1.0], {0: "w1**(-1)"}, 4)
    with pytest.raises(ExpressionError):
        RandomInitialField([1.0], {0: "w2"}, 4)
    with pytest.raises(ExpressionError):
        RandomInitialField([0.5, 0.25], {0: "w1"}, 4)
    with pytest.raises(ExpressionError):
        RandomInitialField([], {9: "1"}, 4)


def test_Y_and_its_malliavin_derivative():
    path = sample_path(1.0, 8, 0)
    Y = RandomInitialField([1.0], {0: "1 + sin(w1)/2"}, 4)
    w = path.values[-1]
    assert Y.evaluate(path)[0] == pytest.approx(1 + math.sin(w) / 2)
    assert Y.malliavin(path, 0.5)[0] == pytest.approx(math.cos(w) / 2)
    assert Y.malliavin(path, 1.0)[0] == pytest.approx(math.cos(w) / 2)  # closed indicator at tau


def test_malliavin_vanishes_after_tau():
    path = sample_path(1.0, 8, 0)
    Y = RandomInitialField([0.5], {1: "w1"}, 4)
    assert Y.malliavin(path, 0.25)[1] == 1.0
    assert Y.malliavin(path, 0.75)[1] == 0.0
    label, directions = Y.segments(path)
    assert list(label) == [0, 0, 0, 0, 0, -1, -1, -1, -1]
    np.testing.assert_array_equal(directions, [[0, 1, 0, 0]])


def test_deterministic_Y():
    Y = RandomInitialField([], {0: "2"}, 4)
    assert Y.is_deterministic
    assert not RandomInitialField([1.0], {0: "w1"}, 4).is_deterministic


def test_partition_validation():
    np.testing.assert_array_equal(uniform_partition(16, 4), [0, 4, 8, 12, 16])
    with pytest.raises(ValueError):
        uniform_partition(16, 3)


def test_ito_increments_schemes():
    path = sample_path(1.0, 16, 0)
    Q = growth_process(path, 1.0)
    assert np.array_equal(ito_increments(path, Q, 1.0, "euler"), Q.values[:-1] * path.increments)
    with pytest.raises(ValueError):
        ito_increments(path, Q, 1.0, "rk")


@pytest.fixture(scope="module")
def run(basis2):
    Y = RandomInitialField([1.0], {0: "1 + sin(w1)/2"}, basis2.n)
    return solve_anticipating(basis2, Y, sample_path(1.0, N, 3), 0.5, SolverConfig(1.0, 1.0, N), grid_M=0)


def test_one_sided_traces_differ_by_sigma_u(run):
    s = np.arange(N + 1)
    minus, plus = one_sided(run, s)
    assert np.abs(plus - minus - run.sigma * run.u).max() <= 1e-15 * np.abs(run.u).max()
    np.testing.assert_allclose(nabla_u(run, s), minus + 0.5 * run.sigma * run.u, atol=1e-15)


def test_forms_agree_and_residual_small(run):
    r = residual_anticipating(run, uniform_partition(N, 8))
    assert abs(r.ito_form - r.stratonovich_form) <= 1e-12 * r.scale
    assert r.ito_form < 0.05 * r.scale
    assert r.without_correction > 3 * r.ito_form


def test_correction_vanishes_for_deterministic_Y(basis2):
    Y = RandomInitialField([], {0: "1.5"}, basis2.n)
    r = solve_anticipating(basis2, Y, sample_path(1.0, N, 3), 0.5, SolverConfig(1.0, 1.0, N), grid_M=0)
    forward, correction = skorohod_parts(r, uniform_partition(N, 8))
    assert np.all(correction == 0.0)
    res = residual_anticipating(r, uniform_partition(N, 8))
    assert res.without_correction == res.ito_form


def test_sweep_times(run):
    assert [r.t for r in residual_sweep(run, 8)] == [0.25, 0.5, 1.0]


def test_stratonovich_integral_reduces_with_sigma_zero(basis2):
    Y = RandomInitialField([1.0], {0: "w1"}, basis2.n)
    r = solve_anticipating(basis2, Y, sample_path(1.0, 64, 0), 0.0, SolverConfig(1.0, 1.0, 64), grid_M=8)
    assert r.grid is not None
    p = uniform_partition(64, 8)
    assert np.all(np.isfinite(stratonovich_integral(r, p)))


def test_deterministic_two_mode_refinement(basis2):
    Y = RandomInitialField([], {basis2.mode_index(1, 0): "0.6", basis2.mode_index(1, 1, "sin"): "0.8"}, basis2.n)
    levels = [256, 512, 1024, 2048]
    res = np.empty((8, len(levels)))
    for k in range(8):
        fine = sample_path(1.0, levels[-1], 2024, k)
        for li, n in enumerate(levels):
            run = solve_anticipating(basis2, Y, fine.coarsen(levels[-1] // n), 0.5, SolverConfig(1.0, 1.0, n), grid_M=0)
            r = residual_anticipating(run, uniform_partition(n, 8))
            res[k, li] = r.ito_form / r.scale
    rms = np.sqrt(np.mean(res ** 2, axis=0))
    assert np.all(rms[:-1] / rms[1:] >= 1.3)
    assert res[:, -1].max() <= 0.05
