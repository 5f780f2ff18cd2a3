"""MPS compression of sampled fields and the MPS-vs-circuit cost model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .linalg import InvalidInput, svd

MAX_DENSE_SITES = 24


@dataclass(frozen=True)
class MPS:
    """Left-canonical MPS; ``norm`` carries the overall scale so the cores stay isometric."""

    cores: tuple[NDArray[np.complex128], ...]
    norm: float = 1.0
    truncation_error: float = 0.0

    @property
    def n(self) -> int:
        return len(self.cores)

    @property
    def bonds(self) -> list[int]:
        return [c.shape[2] for c in self.cores[:-1]]

    @property
    def chi(self) -> int:
        return max([1, *self.bonds])

    @property
    def n_params(self) -> int:
        return int(sum(c.size for c in self.cores))


def _num_sites(length: int) -> int:
    n = int(round(np.log2(length))) if length > 0 else -1
    if n < 0 or 2**n != length:
        raise InvalidInput(f"vector length {length} is not a power of two")
    return n


def mps_from_dense(v: ArrayLike, chi_max: int, tol: float = 0.0) -> MPS:
    """Sequential left-to-right SVDs with truncation.

    At each cut the kept rank is the smallest one whose discarded squared
    singular values stay within ``tol**2 / (n - 1)`` of the (unit) norm, capped
    by ``chi_max``.  ``truncation_error`` is the relative l2 error of the
    result, i.e. the square root of the summed discarded weights.
    """
    vec = np.asarray(v, dtype=np.complex128).reshape(-1)
    n = _num_sites(vec.size)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise InvalidInput("cannot compress the zero vector")
    if n == 0:
        return MPS((vec.reshape(1, 1, 1) / norm,), norm)
    rest = (vec / norm).reshape(1, -1)
    budget = tol**2 / max(n - 1, 1)
    cores = []
    discarded = 0.0
    for _ in range(n - 1):
        left = rest.shape[0]
        mat = rest.reshape(left * 2, -1)
        u, s, vh = svd(mat)
        w = s**2
        tail = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
        keep = len(s)
        for k in range(1, len(s) + 1):
            if tail[k] <= budget:
                keep = k
                break
        keep = max(1, min(keep, chi_max))
        discarded += float(tail[keep])
        cores.append(u[:, :keep].reshape(left, 2, keep))
        rest = s[:keep, None] * vh[:keep]
    # renormalise the last core so the chain stays exactly left-canonical
    last_norm = np.linalg.norm(rest)
    cores.append((rest / last_norm).reshape(rest.shape[0], 2, 1))
    return MPS(tuple(cores), norm * float(last_norm), float(np.sqrt(max(discarded, 0.0))))


def mps_to_dense(m: MPS) -> NDArray[np.complex128]:
    if m.n > MAX_DENSE_SITES:
        raise InvalidInput(f"refusing to densify an MPS on {m.n} > {MAX_DENSE_SITES} sites")
    acc = m.cores[0].reshape(2, -1)
    for c in m.cores[1:]:
        acc = (acc @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[2])
    return acc.reshape(-1) * m.norm


def relative_error(approx: ArrayLike, exact: ArrayLike) -> float:
    """``1 - |<a, b>|^2 / (|a|^2 |b|^2)``; the scale-invariant infidelity used throughout."""
    a = np.asarray(approx, dtype=np.complex128).reshape(-1)
    b = np.asarray(exact, dtype=np.complex128).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInput(f"length mismatch {a.shape} vs {b.shape}")
    na, nb = np.vdot(a, a).real, np.vdot(b, b).real
    if na == 0.0 or nb == 0.0:
        raise InvalidInput("relative error undefined for a zero-norm field")
    fid = abs(np.vdot(a, b)) ** 2 / (na * nb)
    return float(min(max(1.0 - fid, 0.0), 1.0))


def truncation_error_at(v: ArrayLike, chi: int) -> float:
    """Infidelity of the ``chi``-truncated MPS of ``v``."""
    m = mps_from_dense(v, chi_max=chi, tol=0.0)
    return relative_error(mps_to_dense(m), v)


def min_bond_for_accuracy(v: ArrayLike, target_err: float) -> int:
    """Smallest ``chi`` with infidelity ``1 - F`` at most ``target_err``.

    Bisection over ``chi``; the error is non-increasing in ``chi`` because each
    cut keeps a superset of singular vectors.
    """
    if not 0.0 < target_err < 1.0:
        raise InvalidInput("target_err must lie in (0, 1)")
    vec = np.asarray(v).reshape(-1)
    n = _num_sites(vec.size)
    lo, hi = 1, max(1, 2 ** (n // 2))
    if truncation_error_at(vec, lo) <= target_err:
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if truncation_error_at(vec, mid) <= target_err:
            hi = mid
        else:
            lo = mid
    return hi


def cost_models(n: int, chi: int, n_params: int, eps: float) -> dict[str, float]:
    """Minimal runtime estimates of the MPS and circuit encodings.

    ``t_mps = n * chi**3``; the circuit cost is ``n_params / eps**k`` for the
    best (``k = 1``) and worst (``k = 2``) sampling scaling.
    """
    if min(n, chi, n_params) <= 0 or eps <= 0:
        raise InvalidInput("cost model inputs must be positive")
    t_mps = float(n * chi**3)
    t_qc_best = n_params / eps
    t_qc_worst = n_params / eps**2
    return {
        "t_mps": t_mps,
        "t_qc_best": t_qc_best,
        "t_qc_worst": t_qc_worst,
        "ratio_best": t_qc_best / t_mps,
        "ratio_worst": t_qc_worst / t_mps,
        "mps_params": float(n * chi**2),
        "qc_params": float(n_params),
    }


def interleave_bits(field: ArrayLike) -> NDArray:
    """Reorder a ``(2**m, 2**m, 2**m)`` field to 1D with bit order x1 y1 z1 x2 y2 z2 ..."""
    arr = np.asarray(field)
    if arr.ndim != 3 or len(set(arr.shape)) != 1:
        raise InvalidInput("expected a cubic 3D field")
    m = _num_sites(arr.shape[0])
    t = arr.reshape((2,) * (3 * m))
    order = [axis * m + b for b in range(m) for axis in range(3)]
    return t.transpose(order).reshape(-1)
