import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from snse.basis import (BasisError, SpectralBasis, audit_b_estimates, build_torus_basis, load_basis, mode_count,
                        quadrature_b)


def test_mode_counts():
    assert [mode_count(K) for K in (1, 2, 3, 4)] == [4, 12, 28, 48]


def test_memory_budget_reports_mode_count():
    with pytest.raises(BasisError, match="48 modes"):
        build_torus_basis(4, memory_budget=1000)


def test_eigenvalues_and_first_mode(basis2):
    assert basis2.eigenvalues[0] == 1.0
    assert np.all(np.diff(basis2.eigenvalues) >= 0)
    assert basis2.mode_index(0, 1) == 0


def test_single_mode_self_interaction_vanishes(basis3):
    for i in range(basis3.n):
        e = basis3.unit(i)
        assert np.all(basis3.apply_B(e, e) == 0.0)


def test_stored_tensor_antisymmetric(basis3):
    basis3.validate_tensor()
    t = basis3.dense
    np.testing.assert_array_equal(t, -t.transpose(0, 2, 1))


def test_b_form_matches_apply_B(basis2):
    rng = np.random.default_rng(0)
    u, v, w = rng.standard_normal((3, basis2.n))
    assert basis2.b_form(u, v, w) == pytest.approx(np.dot(basis2.apply_B(u, v), w), abs=1e-14)


def test_batched_B_matches_single(basis2):
    rng = np.random.default_rng(1)
    U = rng.standard_normal((5, basis2.n))
    W = rng.standard_normal((5, basis2.n))
    batch = basis2.apply_B(U, W)
    for k in range(5):
        np.testing.assert_allclose(batch[k], basis2.apply_B(U[k], W[k]), atol=1e-14)


def test_jacobian_is_derivative(basis2):
    rng = np.random.default_rng(2)
    v, eta = rng.standard_normal((2, basis2.n))
    lin = basis2.jacobian(v) @ eta
    np.testing.assert_allclose(lin, basis2.apply_B(eta, v) + basis2.apply_B(v, eta), atol=1e-13)


def test_quadrature_oracle_on_nonzero_entries(basis2):
    for (i, j, l), x in list(zip(basis2.entries.tolist(), basis2.values))[:20]:
        assert quadrature_b(basis2.modes, i, j, l) == pytest.approx(x, abs=1e-10)


def test_dimension_mismatch(basis2):
    with pytest.raises(BasisError):
        basis2.apply_B(np.zeros(3), np.zeros(3))


def test_save_load_round_trip(basis2, tmp_path):
    basis2.save(tmp_path / "b.ndjson")
    b = load_basis(tmp_path / "b.ndjson")
    np.testing.assert_array_equal(b.values, basis2.values)
    np.testing.assert_array_equal(b.entries, basis2.entries)
    assert b.modes == basis2.modes


def test_load_rejects_broken_antisymmetry(basis2, tmp_path):
    bad = SpectralBasis(basis2.eigenvalues, basis2.entries[:1], basis2.values[:1])
    bad.save(tmp_path / "bad.ndjson")
    with pytest.raises(BasisError):
        load_basis(tmp_path / "bad.ndjson")


def test_norm_consistency(basis3):
    v = np.random.default_rng(3).standard_normal(basis3.n)
    nu = 0.3
    assert basis3.v_norm(v) ** 2 == pytest.approx(np.dot(basis3.apply_A(v, nu), v) / nu, rel=1e-13)


def test_audit_rejects_zero_samples(basis2):
    with pytest.raises(ValueError):
        audit_b_estimates(basis2, 0, 0)


def test_audit_cap(basis2):
    r = audit_b_estimates(basis2, 50, 0)
    r.check(10.0)
    with pytest.raises(BasisError):
        r.check(1e-6)


def test_audit_samples_are_nested(basis2):
    a = audit_b_estimates(basis2, 40, 7)
    b = audit_b_estimates(basis2, 80, 7)
    for k in a.max_ratio:
        assert b.max_ratio[k] >= a.max_ratio[k]


coeffs = arrays(np.float64, 12, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(coeffs, coeffs)
def test_energy_neutrality_property(u, v):
    b = build_torus_basis(2, verify=False)
    scale = max(1.0, np.linalg.norm(u) * np.linalg.norm(v) ** 2)
    assert abs(b.b_form(u, v, v)) <= 1e-12 * scale


@settings(max_examples=60, deadline=None)
@given(coeffs)
def test_poincare_on_truncation(v):
    b = build_torus_basis(2, verify=False)
    assert b.h_norm(v) <= b.v_norm(v) / np.sqrt(b.mu_min) * (1 + 1e-12) + 1e-300
