"""Dense complex linear-algebra primitives shared by the tensor-network layers."""

from __future__ import annotations

import logging

import numpy as np
from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

ATOL = 1e-12
RTOL = 1e-10


class NumericalFailure(RuntimeError):
    """Raised when a factorization does not converge or produces non-finite output."""


class InvalidInput(ValueError):
    """Raised when an input violates a documented precondition."""


def close(a: ArrayLike, b: ArrayLike, atol: float = ATOL, rtol: float = RTOL) -> bool:
    """Hybrid tolerance check ``|a - b| <= atol + rtol * |b|`` applied elementwise."""
    return bool(np.all(np.abs(np.asarray(a) - np.asarray(b)) <= atol + rtol * np.abs(np.asarray(b))))


def _as_matrix(m: ArrayLike) -> NDArray[np.complex128]:
    arr = np.asarray(m, dtype=np.complex128)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInput(f"expected a non-empty 2D matrix, got shape {arr.shape}")
    return arr


def _check_finite(*arrays: NDArray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure("non-finite entries in factorization output")


def svd(m: ArrayLike) -> tuple[NDArray[np.complex128], NDArray[np.float64], NDArray[np.complex128]]:
    """Thin SVD ``m = u @ diag(s) @ vh`` with singular values in descending order.

    Falls back to the slower but more robust ``gesvd`` driver when the
    divide-and-conquer routine fails to converge.
    """
    arr = _as_matrix(m)
    try:
        u, s, vh = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError:
        import scipy.linalg

        logger.debug("gesdd failed on %s matrix, retrying with gesvd", arr.shape)
        try:
            u, s, vh = scipy.linalg.svd(arr, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"SVD did not converge for shape {arr.shape}") from exc
    _check_finite(u, s, vh)
    return u, s, vh


def qr_factor(m: ArrayLike, with_flag: bool = False):
    """Thin QR with the diagonal of ``r`` made real and non-negative.

    The sign convention makes ``q`` a deterministic function of ``m``, which in
    turn makes the QR retraction reproducible.  Rank-deficient inputs still get
    an orthonormal ``q`` (zero diagonal entries of ``r`` are left as is, and the
    corresponding columns of ``q`` come from LAPACK's Householder vectors); a
    warning is logged and, with ``with_flag=True``, a third return value
    ``rank_deficient`` reports it.
    """
    arr = _as_matrix(m)
    rows, cols = arr.shape
    if rows < cols:
        raise InvalidInput(f"qr_factor needs rows >= cols, got {arr.shape}")
    q, r = np.linalg.qr(arr, mode="reduced")
    d = np.diag(r).copy()
    mag = np.abs(d)
    phase = np.ones_like(d)
    nz = mag > 0
    phase[nz] = d[nz] / mag[nz]
    q = q * phase[None, :]
    r = phase.conj()[:, None] * r
    scale = mag.max() if mag.size else 0.0
    deficient = bool(scale == 0.0 or np.any(mag <= 1e-13 * scale))
    if deficient:
        logger.debug("qr_factor: input of shape %s is (numerically) rank deficient", arr.shape)
    _check_finite(q, r)
    if with_flag:
        return q, r, deficient
    return q, r


def gram_schmidt_complete(iso: ArrayLike, rows: bool = False) -> NDArray[np.complex128]:
    """Extend an isometry to a square unitary.

    With ``rows=False`` the input has orthonormal columns and they become the
    leading columns of the result; with ``rows=True`` the input rows become the
    leading rows.  New directions are produced by Gram-Schmidt against the
    standard basis (two passes for numerical stability).
    """
    arr = _as_matrix(iso)
    if rows:
        return gram_schmidt_complete(arr.conj().T).conj().T
    dim, k = arr.shape
    if k > dim:
        raise InvalidInput(f"more columns than rows: {arr.shape}")
    residual = np.linalg.norm(arr.conj().T @ arr - np.eye(k))
    if residual > 1e-8:
        raise InvalidInput(f"columns are not orthonormal (residual {residual:.3e})")
    if k == dim:
        return arr.copy()
    basis = [arr[:, i] for i in range(k)]
    out = np.empty((dim, dim), dtype=np.complex128)
    out[:, :k] = arr
    filled = k
    # try standard basis vectors in order of least overlap with the existing span
    overlap = np.sum(np.abs(arr) ** 2, axis=1)
    for idx in np.argsort(overlap, kind="stable"):
        if filled == dim:
            break
        v = np.zeros(dim, dtype=np.complex128)
        v[idx] = 1.0
        for _ in range(2):
            for b in basis:
                v = v - b * np.vdot(b, v)
        nv = np.linalg.norm(v)
        if nv < 1e-6:
            continue
        v = v / nv
        basis.append(v)
        out[:, filled] = v
        filled += 1
    if filled != dim:
        raise NumericalFailure("Gram-Schmidt completion failed to find enough directions")
    return out


def frobenius_norm(m: ArrayLike) -> float:
    arr = np.asarray(m)
    return float(np.sqrt(np.sum(np.abs(arr) ** 2)))


def stiefel_residual(q: ArrayLike) -> float:
    """``||q^H q - I||_F`` for a matrix with (intended) orthonormal columns."""
    arr = np.asarray(q)
    return frobenius_norm(arr.conj().T @ arr - np.eye(arr.shape[1]))
