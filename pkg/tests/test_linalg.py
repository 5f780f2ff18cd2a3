from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpqc.linalg import (InvalidInput, NumericalFailure, close, gram_schmidt_complete, qr_factor,
                         stiefel_residual, svd)


def random_complex(rng, rows, cols):
    return rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_svd_reconstructs_and_orders(rows, cols, seed):
    m = random_complex(np.random.default_rng(seed), rows, cols)
    u, s, vh = svd(m)
    np.testing.assert_allclose(u @ np.diag(s) @ vh, m, atol=1e-12)
    assert np.all(np.diff(s) <= 1e-12)


@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 10_000))
def test_qr_factor_sign_convention(cols, extra, seed):
    m = random_complex(np.random.default_rng(seed), cols + extra, cols)
    q, r = qr_factor(m)
    np.testing.assert_allclose(q @ r, m, atol=1e-12)
    assert stiefel_residual(q) < 1e-12
    d = np.diag(r)
    assert np.all(np.abs(d.imag) < 1e-14) and np.all(d.real >= 0)


def test_qr_factor_is_deterministic(rng):
    m = random_complex(rng, 5, 3)
    q1, _ = qr_factor(m)
    q2, _ = qr_factor(m * 1.0)
    assert np.array_equal(q1, q2)


def test_qr_factor_flags_rank_deficiency():
    m = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    q, r, deficient = qr_factor(m, with_flag=True)
    assert deficient
    assert stiefel_residual(q) < 1e-12
    np.testing.assert_allclose(q @ r, m, atol=1e-12)


def test_qr_factor_rejects_wide():
    with pytest.raises(InvalidInput):
        qr_factor(np.ones((2, 3)))


@given(st.integers(1, 5), st.integers(0, 5), st.integers(0, 10_000), st.booleans())
def test_gram_schmidt_completion_is_unitary(k, extra, seed, rows):
    dim = k + extra
    q, _ = qr_factor(random_complex(np.random.default_rng(seed), dim, k))
    iso = q.conj().T if rows else q
    u = gram_schmidt_complete(iso, rows=rows)
    assert u.shape == (dim, dim)
    np.testing.assert_allclose(u.conj().T @ u, np.eye(dim), atol=1e-12)
    if rows:
        np.testing.assert_allclose(u[:k], iso, atol=1e-14)
    else:
        np.testing.assert_allclose(u[:, :k], iso, atol=1e-14)


def test_gram_schmidt_rejects_non_isometry():
    with pytest.raises(InvalidInput):
        gram_schmidt_complete(np.array([[1.0], [1.0]]))


def test_non_finite_input_fails():
    with pytest.raises((NumericalFailure, ValueError)):
        svd(np.array([[np.nan, 1.0], [0.0, 1.0]]))


def test_close_hybrid_tolerance():
    assert close(1.0 + 1e-13, 1.0)
    assert close(1e6 * (1 + 1e-11), 1e6)
    assert not close(1.0 + 1e-6, 1.0)


def test_empty_matrix_rejected():
    with pytest.raises(InvalidInput):
        svd(np.zeros((0, 3)))
