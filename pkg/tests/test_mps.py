from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpqc.linalg import InvalidInput
from tpqc.mps import (cost_models, interleave_bits, min_bond_for_accuracy, mps_from_dense, mps_to_dense,
                      relative_error, truncation_error_at)


@given(st.integers(1, 9), st.integers(0, 10_000))
def test_exact_round_trip(n, seed):
    v = np.random.default_rng(seed).standard_normal(2**n)
    m = mps_from_dense(v, chi_max=2**n)
    np.testing.assert_allclose(mps_to_dense(m).real, v, atol=1e-12)
    assert m.truncation_error < 1e-12
    for c in m.cores:
        mat = c.reshape(-1, c.shape[2])
        np.testing.assert_allclose(mat.conj().T @ mat, np.eye(c.shape[2]), atol=1e-12)


@given(st.integers(3, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_truncation_error_reported(n, chi, seed):
    v = np.random.default_rng(seed).standard_normal(2**n)
    m = mps_from_dense(v, chi_max=chi)
    assert m.chi <= chi
    approx = mps_to_dense(m)
    rel_l2 = np.linalg.norm(approx - v) / np.linalg.norm(v)
    # successive orthogonal projections: discarded weights add up in quadrature
    assert rel_l2 == pytest.approx(m.truncation_error, abs=1e-10)


def test_product_state_has_bond_one():
    v = np.kron(np.kron([1.0, 2.0], [3.0, -1.0]), [0.5, 0.5])
    assert min_bond_for_accuracy(v, 1e-12) == 1


@given(st.integers(2, 8), st.integers(0, 10_000))
def test_error_non_increasing_in_chi(n, seed):
    v = np.random.default_rng(seed).standard_normal(2**n)
    errs = [truncation_error_at(v, chi) for chi in range(1, 2 ** (n // 2) + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-12


@given(st.integers(2, 8), st.floats(1e-6, 0.5), st.integers(0, 10_000))
def test_min_bond_is_minimal(n, target, seed):
    v = np.random.default_rng(seed).standard_normal(2**n)
    chi = min_bond_for_accuracy(v, target)
    assert truncation_error_at(v, chi) <= target
    if chi > 1:
        assert truncation_error_at(v, chi - 1) > target


@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-10, 10))
def test_relative_error_scale_invariant(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(16), r.standard_normal(16)
    e = relative_error(x, y)
    assert 0.0 <= e <= 1.0
    if abs(b) > 1e-3:
        assert relative_error(a * x, b * y) == pytest.approx(e, abs=1e-12)
    assert relative_error(x, x) == pytest.approx(0.0, abs=1e-15)


def test_relative_error_rejects_zero():
    with pytest.raises(InvalidInput):
        relative_error(np.zeros(4), np.ones(4))


def test_interleave_bits_order():
    m = 2
    f = np.arange(4**3).reshape(4, 4, 4)
    out = interleave_bits(f)
    for x in range(4):
        for y in range(4):
            for z in range(4):
                bits = [(x >> 1) & 1, (y >> 1) & 1, (z >> 1) & 1, x & 1, y & 1, z & 1]
                idx = int("".join(map(str, bits)), 2)
                assert out[idx] == f[x, y, z]
    assert m == 2


def test_cost_models():
    c = cost_models(6, 4, 100, 0.01)
    assert c["t_mps"] == 6 * 64
    assert c["t_qc_best"] == pytest.approx(1e4)
    assert c["t_qc_worst"] == pytest.approx(1e6)
    assert c["ratio_worst"] == pytest.approx(1e6 / 384)
    with pytest.raises(InvalidInput):
        cost_models(0, 1, 1, 0.1)


def test_non_power_of_two_rejected():
    with pytest.raises(InvalidInput):
        mps_from_dense(np.ones(6), 2)
