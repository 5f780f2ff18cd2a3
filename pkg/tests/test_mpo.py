from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpqc.linalg import InvalidInput
from tpqc.mpo import (MPO, Boundary, StencilSpec, backward_first, banded_toeplitz_mpo, central_first,
                      central_first_8th, central_second, cnot_mpo, diagonal_mpo, forward_first, identity_mpo,
                      mpo_add, mpo_apply, mpo_compress, mpo_inner, mpo_norm, mpo_scale, mpo_to_dense, shift_mpo,
                      sponge_mpo, sponge_profile, staggered_backward_8th, staggered_forward_8th, stencil_mpo,
                      tridiag_toeplitz_mpo)

NS = range(2, 11)


def banded(size, entries, periodic):
    """Dense oracle from ``numpy.eye`` offsets; periodic closure via modular column indices."""
    out = np.zeros((size, size))
    rows = np.arange(size)
    for off, val in entries.items():
        if periodic:
            out[rows, (rows + off) % size] += val
        else:
            out += val * np.eye(size, k=off)
    return out


def sponge_oracle(kappa, n_tilde, n):
    size, edge = 2**n, 2**n_tilde
    i = np.arange(size)
    right = (np.exp(kappa * (i - (size - edge))) - 1) / (np.exp(kappa * (edge - 1)) - 1)
    left = (np.exp(kappa * (edge - 1 - i)) - 1) / (np.exp(kappa * (edge - 1)) - 1)
    return np.where(i >= size - edge, right, np.where(i < edge, left, 0.0))


@pytest.mark.parametrize("n", NS)
def test_tridiag_matches_dense(n):
    a, b, c = 0.3, -1.7, 2.5
    dense = mpo_to_dense(tridiag_toeplitz_mpo(a, b, c, n))
    np.testing.assert_allclose(dense, banded(2**n, {0: a, 1: b, -1: c}, False), atol=1e-12, rtol=0)
    assert tridiag_toeplitz_mpo(a, b, c, n).max_bond <= 3


@pytest.mark.parametrize("n", NS)
@pytest.mark.parametrize("k", [-3, -1, 0, 1, 2])
@pytest.mark.parametrize("wrap", ["none", "all", "only"])
def test_shift_matches_dense(n, k, wrap):
    size = 2**n
    if abs(k) >= size:
        pytest.skip("shift out of range")
    full = banded(size, {k: 1.0}, True)
    trunc = banded(size, {k: 1.0}, False)
    expected = {"all": full, "none": trunc, "only": full - trunc}[wrap]
    np.testing.assert_allclose(mpo_to_dense(shift_mpo(k, n, wrap)), expected, atol=1e-12, rtol=0)
    assert shift_mpo(k, n, wrap).max_bond <= 2


STENCILS = {
    "central_first": (central_first, lambda dx: {-1: -0.5 / dx, 1: 0.5 / dx}),
    "central_second": (central_second, lambda dx: {-1: dx**-2, 0: -2 * dx**-2, 1: dx**-2}),
    "forward_first": (forward_first, lambda dx: {0: -1 / dx, 1: 1 / dx}),
    "backward_first": (backward_first, lambda dx: {-1: -1 / dx, 0: 1 / dx}),
}


@pytest.mark.parametrize("n", NS)
@pytest.mark.parametrize("name", sorted(STENCILS))
@pytest.mark.parametrize("boundary", ["dirichlet", "periodic"])
def test_stencil_mpo_matches_dense(n, name, boundary):
    build, entries = STENCILS[name]
    dx = 2 * np.pi / 2**n
    m = stencil_mpo(build(dx, boundary), n)
    expected = banded(2**n, entries(dx), boundary == "periodic")
    np.testing.assert_allclose(mpo_to_dense(m), expected, atol=1e-12 * max(1.0, dx**-2), rtol=0)


@pytest.mark.parametrize("n", [4, 6, 8, 10])
@pytest.mark.parametrize("boundary", ["dirichlet", "periodic"])
def test_eighth_order_stencils_match_dense(n, boundary):
    dx = 8.0 / 2**n
    central = {}
    for k, a in enumerate((4 / 5, -1 / 5, 4 / 105, -1 / 280), start=1):
        central[k], central[-k] = a / dx, -a / dx
    fwd = {}
    for k, a in enumerate((1225 / 1024, -245 / 3072, 49 / 5120, -5 / 7168), start=1):
        fwd[k] = fwd.get(k, 0.0) + a / dx
        fwd[1 - k] = fwd.get(1 - k, 0.0) - a / dx
    bwd = {o - 1: v for o, v in fwd.items()}
    periodic = boundary == "periodic"
    for build, entries in ((central_first_8th, central), (staggered_forward_8th, fwd), (staggered_backward_8th, bwd)):
        got = mpo_to_dense(stencil_mpo(build(dx, boundary), n))
        np.testing.assert_allclose(got, banded(2**n, entries, periodic), atol=1e-12 / dx, rtol=0)


def test_staggered_stencil_has_eighth_order_accuracy():
    errors = []
    for n in (4, 5):
        dx = 2 * np.pi / 2**n
        x = np.arange(2**n) * dx
        d = mpo_to_dense(stencil_mpo(staggered_forward_8th(dx, "periodic"), n)).real
        errors.append(np.max(np.abs(d @ np.sin(x) - np.cos(x + dx / 2))))
    assert errors[0] / errors[1] == pytest.approx(2**8, rel=0.1)


@pytest.mark.parametrize("n", NS)
def test_stencil_dense_helper_agrees(n):
    spec = StencilSpec((-2, 0, 3), (1.5, -0.25, 2.0), Boundary.PERIODIC, 1.0)
    expected = banded(2**n, {-2: 1.5, 0: -0.25, 3: 2.0}, True) if 2**n > 3 else None
    if expected is None:
        pytest.skip("offset out of range")
    np.testing.assert_allclose(spec.dense(n), expected, atol=1e-15)
    np.testing.assert_allclose(mpo_to_dense(stencil_mpo(spec, n)), expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize("n", range(3, 11))
@pytest.mark.parametrize("n_tilde", [1, 2, 4])
def test_sponge_matches_formula(n, n_tilde):
    if n_tilde >= n:
        pytest.skip("sponge width must be below n")
    kappa = 0.13
    m = sponge_mpo(kappa, n_tilde, n)
    assert m.max_bond <= 4
    oracle = sponge_oracle(kappa, n_tilde, n)
    np.testing.assert_allclose(mpo_to_dense(m), np.diag(oracle), atol=1e-12, rtol=0)
    np.testing.assert_allclose(sponge_profile(kappa, n_tilde, n), oracle, atol=1e-14)
    assert np.max(oracle) == pytest.approx(1.0, abs=1e-14)


def test_sponge_rejects_bad_width():
    with pytest.raises(InvalidInput):
        sponge_mpo(0.13, 4, 4)
    with pytest.raises(InvalidInput):
        sponge_mpo(-1.0, 2, 4)


def test_cnot_mpo():
    cnot = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
    np.testing.assert_allclose(mpo_to_dense(cnot_mpo()), cnot, atol=1e-15)


def test_identity_and_reverse(rng):
    np.testing.assert_allclose(mpo_to_dense(identity_mpo(5)), np.eye(32), atol=0)
    m = tridiag_toeplitz_mpo(1.0, 2.0, 3.0, 4)
    perm = np.array([int(format(i, "04b")[::-1], 2) for i in range(16)])
    d = mpo_to_dense(m)
    np.testing.assert_allclose(mpo_to_dense(m.reversed()), d[np.ix_(perm, perm)], atol=1e-14)


@given(st.integers(2, 6), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_algebra_is_linear(n, s, t, seed):
    r = np.random.default_rng(seed)
    a = tridiag_toeplitz_mpo(*r.standard_normal(3), n)
    b = shift_mpo(1, n, "all")
    combo = mpo_add(mpo_scale(a, s), mpo_scale(b, t))
    expected = s * mpo_to_dense(a) + t * mpo_to_dense(b)
    np.testing.assert_allclose(mpo_to_dense(combo), expected, atol=1e-12)
    np.testing.assert_allclose(mpo_to_dense(s * a + t * b), expected, atol=1e-12)
    comp = mpo_compress(combo, 64, 1e-14)
    np.testing.assert_allclose(mpo_to_dense(comp), expected, atol=1e-11)
    assert comp.max_bond <= combo.max_bond


@given(st.integers(2, 7), st.integers(0, 10_000))
def test_inner_norm_apply_against_dense(n, seed):
    r = np.random.default_rng(seed)
    a = tridiag_toeplitz_mpo(*r.standard_normal(3), n)
    b = stencil_mpo(central_first(0.3, "periodic"), n)
    da, db = mpo_to_dense(a), mpo_to_dense(b)
    assert mpo_inner(a, b) == pytest.approx(np.trace(da.conj().T @ db), abs=1e-10)
    assert mpo_norm(a) == pytest.approx(np.linalg.norm(da), rel=1e-12)
    v = r.standard_normal(2**n) + 1j * r.standard_normal(2**n)
    np.testing.assert_allclose(mpo_apply(a, v), da @ v, atol=1e-11)


def test_compress_respects_tolerance(rng):
    n = 6
    a = mpo_add(stencil_mpo(central_second(1.0, "periodic"), n), shift_mpo(3, n, "all"))
    m = mpo_compress(a, 64, 1e-3)
    err = np.linalg.norm(mpo_to_dense(m) - mpo_to_dense(a)) / np.linalg.norm(mpo_to_dense(a))
    assert err <= 1e-3


@given(st.integers(1, 7), st.integers(0, 10_000))
def test_diagonal_mpo(n, seed):
    vals = np.random.default_rng(seed).standard_normal(2**n)
    np.testing.assert_allclose(mpo_to_dense(diagonal_mpo(vals)), np.diag(vals), atol=1e-11)


def test_banded_toeplitz_ignores_boundary_field():
    spec = central_first(1.0, "periodic")
    dense = mpo_to_dense(banded_toeplitz_mpo(spec, 4))
    np.testing.assert_allclose(dense, banded(16, {-1: -0.5, 1: 0.5}, False), atol=1e-13)


def test_invalid_cores_rejected():
    with pytest.raises(InvalidInput):
        MPO((np.zeros((1, 2, 2, 2)),))
    with pytest.raises(InvalidInput):
        MPO((np.zeros((1, 2, 2, 2)), np.zeros((3, 2, 2, 1))))
    with pytest.raises(InvalidInput):
        StencilSpec((0, 0), (1.0, 2.0))
