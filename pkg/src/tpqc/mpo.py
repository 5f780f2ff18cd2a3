"""Matrix product operators for finite-difference stencils, boundary terms and sponges.

Cores are 4-index arrays laid out as ``(left_bond, out, in, right_bond)``.  Site 0
of ``MPO.cores`` is the most significant bit of the grid index, so
``mpo_to_dense`` is the Kronecker product in list order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .linalg import InvalidInput, svd

MAX_DENSE_SITES = 14

I2x2 = np.eye(2)
P0 = np.array([[1.0, 0.0], [0.0, 0.0]])  # I_1 projector on |0>
P1 = np.array([[0.0, 0.0], [0.0, 1.0]])  # I_2 projector on |1>
J = np.array([[0.0, 1.0], [0.0, 0.0]])  # maps |1> -> |0>
JT = J.T.copy()
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])


class Boundary(str, enum.Enum):
    DIRICHLET = "dirichlet"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class MPO:
    """Immutable chain of operator cores ``(left, out, in, right)``."""

    cores: tuple[NDArray[np.complex128], ...]

    def __post_init__(self) -> None:
        cores = tuple(np.asarray(c, dtype=np.complex128) for c in self.cores)
        if not cores:
            raise InvalidInput("an MPO needs at least one core")
        for j, c in enumerate(cores):
            if c.ndim != 4 or c.shape[1:3] != (2, 2):
                raise InvalidInput(f"core {j} has shape {c.shape}, expected (l, 2, 2, r)")
            if j > 0 and cores[j - 1].shape[3] != c.shape[0]:
                raise InvalidInput(f"bond mismatch between cores {j - 1} and {j}")
        if cores[0].shape[0] != 1 or cores[-1].shape[3] != 1:
            raise InvalidInput("boundary bonds must be 1")
        for c in cores:
            c.setflags(write=False)
        object.__setattr__(self, "cores", cores)

    @property
    def n(self) -> int:
        return len(self.cores)

    @property
    def bonds(self) -> list[int]:
        return [c.shape[3] for c in self.cores[:-1]]

    @property
    def max_bond(self) -> int:
        return max([1, *self.bonds])

    def reversed(self) -> "MPO":
        """Same operator with the site order flipped (MSB <-> LSB)."""
        return MPO(tuple(c.transpose(3, 1, 2, 0) for c in reversed(self.cores)))

    def __add__(self, other: "MPO") -> "MPO":
        return mpo_add(self, other)

    def __mul__(self, s: float) -> "MPO":
        return mpo_scale(self, s)

    __rmul__ = __mul__


@dataclass(frozen=True)
class StencilSpec:
    """Finite-difference stencil: ``(D u)_i = sum_k coefficients[k] * u[i + offsets[k]]``.

    Coefficients already include the ``1/dx**p`` factor; ``dx`` is kept for
    bookkeeping and for the dump format.
    """

    offsets: tuple[int, ...]
    coefficients: tuple[float, ...]
    boundary: Boundary = Boundary.DIRICHLET
    dx: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if len(self.offsets) != len(self.coefficients):
            raise InvalidInput("offsets and coefficients differ in length")
        if len(set(self.offsets)) != len(self.offsets):
            raise InvalidInput("stencil offsets must be distinct")
        if not any(c != 0.0 for c in self.coefficients):
            raise InvalidInput("stencil needs at least one nonzero coefficient")

    def dense(self, n: int) -> NDArray[np.float64]:
        """Independent dense construction (banded Toeplitz or circulant)."""
        size = 2**n
        out = np.zeros((size, size))
        for o, c in zip(self.offsets, self.coefficients):
            for i in range(size):
                j = i + o
                if self.boundary is Boundary.PERIODIC:
                    out[i, j % size] += c
                elif 0 <= j < size:
                    out[i, j] += c
        return out


# ---------------------------------------------------------------------------
# standard stencils


def central_first(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    return StencilSpec((-1, 1), (-0.5 / dx, 0.5 / dx), Boundary(boundary), dx)


def central_second(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    return StencilSpec((-1, 0, 1), (1 / dx**2, -2 / dx**2, 1 / dx**2), Boundary(boundary), dx)


def forward_first(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    return StencilSpec((0, 1), (-1 / dx, 1 / dx), Boundary(boundary), dx)


def backward_first(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    return StencilSpec((-1, 0), (-1 / dx, 1 / dx), Boundary(boundary), dx)


CENTRAL8 = (4 / 5, -1 / 5, 4 / 105, -1 / 280)
STAGGERED8 = (1225 / 1024, -245 / 3072, 49 / 5120, -5 / 7168)


def central_first_8th(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    offsets, coeffs = [], []
    for k, a in enumerate(CENTRAL8, start=1):
        offsets += [k, -k]
        coeffs += [a / dx, -a / dx]
    return StencilSpec(tuple(offsets), tuple(coeffs), Boundary(boundary), dx)


def staggered_forward_8th(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    """Eighth-order derivative evaluated half a cell to the right of each node.

    ``(D u)_i ~ u'(x_i + dx/2) = sum_k a_k (u_{i+k} - u_{i+1-k}) / dx``.
    """
    acc: dict[int, float] = {}
    for k, a in enumerate(STAGGERED8, start=1):
        acc[k] = acc.get(k, 0.0) + a / dx
        acc[1 - k] = acc.get(1 - k, 0.0) - a / dx
    offsets = tuple(sorted(acc))
    return StencilSpec(offsets, tuple(acc[o] for o in offsets), Boundary(boundary), dx)


def staggered_backward_8th(dx: float, boundary: Boundary | str = Boundary.DIRICHLET) -> StencilSpec:
    """Mirror of :func:`staggered_forward_8th`: derivative half a cell to the left."""
    fwd = staggered_forward_8th(dx, boundary)
    pairs = sorted((o - 1, c) for o, c in zip(fwd.offsets, fwd.coefficients))
    return StencilSpec(tuple(o for o, _ in pairs), tuple(c for _, c in pairs), fwd.boundary, dx)


# ---------------------------------------------------------------------------
# builders


def _check_n(n: int, minimum: int = 1) -> None:
    if n < minimum:
        raise InvalidInput(f"need at least {minimum} sites, got n={n}")


def product_mpo(ops: Sequence[NDArray]) -> MPO:
    """Bond-1 MPO of a Kronecker product of 2x2 operators."""
    return MPO(tuple(np.asarray(o, dtype=np.complex128).reshape(1, 2, 2, 1) for o in ops))


def identity_mpo(n: int) -> MPO:
    _check_n(n)
    return product_mpo([I2x2] * n)


def zero_mpo(n: int) -> MPO:
    _check_n(n)
    return product_mpo([np.zeros((2, 2))] * n)


def _block_core(blocks: Sequence[Sequence[NDArray | int]]) -> NDArray[np.complex128]:
    """Matrix-of-operators ``A[l][r]`` (2x2 entries or 0) to a ``(l, 2, 2, r)`` core."""
    rows, cols = len(blocks), len(blocks[0])
    core = np.zeros((rows, 2, 2, cols), dtype=np.complex128)
    for a, row in enumerate(blocks):
        for b, op in enumerate(row):
            if not np.isscalar(op) or op != 0:
                core[a, :, :, b] = op
    return core


def tridiag_toeplitz_mpo(alpha: float, beta: float, gamma: float, n: int) -> MPO:
    """Bond-3 MPO of ``TriDiag(alpha, beta, gamma)`` with zero (Dirichlet) closure.

    ``alpha`` sits on the diagonal, ``beta`` on the superdiagonal and ``gamma``
    on the subdiagonal.  The cores are the standard three-block construction,
    written from the least significant bit upward, then reversed into the
    package's MSB-first order.
    """
    if n < 2:
        raise InvalidInput(f"tridiag_toeplitz_mpo needs n >= 2, got {n}")
    first = _block_core([[alpha * I2x2 + beta * J + gamma * JT, gamma * J, beta * JT]])
    middle = _block_core([[I2x2, 0, 0], [JT, J, 0], [J, 0, JT]])
    last = _block_core([[I2x2], [JT], [J]])
    lsb_first = MPO((first, *([middle] * (n - 2)), last))
    return lsb_first.reversed()


def cnot_mpo() -> MPO:
    """``I_1 (x) I + I_2 (x) sigma_x`` with bond 2 (control on the first site)."""
    return MPO((_block_core([[P0, P1]]), _block_core([[I2x2], [SIGMA_X]])))


def shift_mpo(k: int, n: int, wrap: str = "none") -> MPO:
    """MPO of the shift ``|x> -> |x - k>``, i.e. ones at entries ``(i, i + k)``.

    Built as a ripple-borrow subtractor running from the LSB to the MSB with a
    two-state borrow bond.  ``wrap`` selects which entries survive at the MSB:
    ``"none"`` keeps only in-range entries (Dirichlet truncation), ``"only"``
    keeps only the wrapped-around entries, ``"all"`` gives the circulant shift.
    """
    _check_n(n)
    size = 2**n
    if abs(k) >= size:
        raise InvalidInput(f"shift {k} out of range for n={n}")
    kk = k % size  # x - k == x + (size - kk) mod size, handled via borrow on kk
    bits = [(kk >> b) & 1 for b in range(n)]  # LSB first
    cores_lsb = []
    for b in range(n):
        core = np.zeros((2, 2, 2, 2), dtype=np.complex128)  # (borrow_in, out, in, borrow_out)
        for borrow in (0, 1):
            for xin in (0, 1):
                d = xin - bits[b] - borrow
                out = d % 2
                nb = 1 if d < 0 else 0
                core[borrow, out, xin, nb] = 1.0
        cores_lsb.append(core)
    cores_lsb[0] = cores_lsb[0][:1]  # no incoming borrow at the LSB
    # x - kk underflows exactly when the true target x - k lies outside [0, size)
    # for k > 0; for k < 0 the underflow-free results are the wrapped ones.
    if wrap == "all":
        select = np.array([1.0, 1.0])
    elif wrap == "none":
        select = np.array([1.0, 0.0]) if k >= 0 else np.array([0.0, 1.0])
    elif wrap == "only":
        select = np.array([0.0, 1.0]) if k >= 0 else np.array([1.0, 0.0])
    else:
        raise InvalidInput(f"unknown wrap mode {wrap!r}")
    if k == 0:
        select = np.array([1.0, 0.0]) if wrap != "only" else np.array([0.0, 0.0])
    cores_lsb[-1] = np.einsum("lopr,r->lop", cores_lsb[-1], select)[..., None]
    # the MPO maps column |x> to row |x - k>: entry (x - k, x)
    return MPO(tuple(cores_lsb)).reversed()


def banded_toeplitz_mpo(spec: StencilSpec, n: int, compress: bool = True) -> MPO:
    """Sum of shift MPOs weighted by the stencil, with Dirichlet band truncation.

    The stencil's boundary field is ignored here; use
    :func:`apply_boundary_correction` to add periodic wrap-around entries.
    """
    _check_n(n)
    size = 2**n
    for o in spec.offsets:
        if abs(o) >= size:
            raise InvalidInput(f"offset {o} out of range for n={n}")
    total: MPO | None = None
    for o, c in zip(spec.offsets, spec.coefficients):
        if c == 0.0:
            continue
        # entry (i, i + o) <- shift |x> -> |x - o>
        term = mpo_scale(shift_mpo(o, n, wrap="none"), c)
        total = term if total is None else mpo_add(total, term)
    assert total is not None
    if compress:
        total = mpo_compress(total, max_bond=4 * len(spec.offsets) + 4, tol=1e-14)
    return total


def _basis_op(row_bit: int, col_bit: int) -> NDArray[np.float64]:
    op = np.zeros((2, 2))
    op[row_bit, col_bit] = 1.0
    return op


def _element_mpo(i: int, j: int, n: int, value: float) -> MPO:
    """Bond-1 MPO with a single nonzero ``value`` at dense entry ``(i, j)``."""
    ops = [_basis_op((i >> (n - 1 - s)) & 1, (j >> (n - 1 - s)) & 1) for s in range(n)]
    ops[0] = ops[0] * value
    return product_mpo(ops)


def wrapped_elements(spec: StencilSpec, n: int) -> list[tuple[int, int, float]]:
    """Entries a periodic closure adds on top of the Dirichlet-truncated band."""
    size = 2**n
    out: dict[tuple[int, int], float] = {}
    for o, c in zip(spec.offsets, spec.coefficients):
        for i in range(size):
            j = i + o
            if not 0 <= j < size:
                key = (i, j % size)
                out[key] = out.get(key, 0.0) + c
    return [(i, j, v) for (i, j), v in sorted(out.items()) if v != 0.0]


def apply_boundary_correction(m: MPO, boundary: Boundary | str, spec: StencilSpec) -> MPO:
    """Turn a Dirichlet-truncated stencil MPO into its periodic (circulant) version.

    Each wrapped entry is added as a bond-1 product term, so the bond grows by
    at most one per wrapped entry before the final compression.
    """
    try:
        boundary = Boundary(boundary)
    except ValueError as exc:
        raise InvalidInput(f"unsupported boundary {boundary!r}") from exc
    if boundary is Boundary.DIRICHLET:
        return m
    elements = wrapped_elements(spec, m.n)
    out = m
    for i, j, v in elements:
        out = mpo_add(out, _element_mpo(i, j, m.n, v))
    return mpo_compress(out, max_bond=m.max_bond + len(elements), tol=1e-14)


def stencil_mpo(spec: StencilSpec, n: int) -> MPO:
    """Banded stencil MPO including the boundary closure named in ``spec``."""
    base = banded_toeplitz_mpo(spec, n)
    return apply_boundary_correction(base, spec.boundary, spec)


def sponge_profile(kappa: float, n_tilde: int, n: int) -> NDArray[np.float64]:
    """Per-grid-point sponge value, evaluated directly (used as an oracle)."""
    size, edge = 2**n, 2**n_tilde
    denom = np.expm1((edge - 1) * kappa)
    out = np.zeros(size)
    for i in range(size):
        if i >= size - edge:
            out[i] = np.expm1(kappa * (i - (size - edge))) / denom
        elif i < edge:
            out[i] = np.expm1(kappa * (edge - 1 - i)) / denom
    return out


def sponge_mpo(kappa: float, n_tilde: int, n: int) -> MPO:
    """Bond-4 diagonal sponge operator with maximal entry 1.

    Channels 0/1 select the right/left edge zone (top ``n - n_tilde`` bits all
    one / all zero) and build ``exp(kappa * distance)`` from the low bits;
    channels 2/3 carry the subtracted constant so the innermost point of each
    zone is zero.
    """
    if not 1 <= n_tilde < n:
        raise InvalidInput(f"sponge needs 1 <= n_tilde < n, got n_tilde={n_tilde}, n={n}")
    if kappa <= 0:
        raise InvalidInput("sponge needs kappa > 0")
    pref = 1.0 / np.expm1((2**n_tilde - 1) * kappa)
    cores = []
    for j in range(1, n + 1):  # 1-based site index, j = 1 is the MSB
        if j <= n - n_tilde:
            blocks = [P1, P0, P1, P0]
        else:
            w = np.exp(kappa * 2.0 ** (n - j))
            j1 = np.diag([1.0, w])
            j1t = np.diag([w, 1.0])  # anti-diagonal mirror of J1
            blocks = [j1, j1t, I2x2, I2x2]
        if j == 1:
            core = _block_core([[pref * blocks[0], pref * blocks[1], -pref * blocks[2], -pref * blocks[3]]])
        elif j == n:
            core = _block_core([[blocks[0]], [blocks[1]], [blocks[2]], [blocks[3]]])
        else:
            core = _block_core([[blocks[a] if a == b else 0 for b in range(4)] for a in range(4)])
        cores.append(core)
    return MPO(tuple(cores))


def diagonal_mpo(values: NDArray, max_bond: int = 64, tol: float = 1e-13) -> MPO:
    """Compressed MPO of ``diag(values)`` via a sequential SVD of the value tensor."""
    vals = np.asarray(values, dtype=np.complex128)
    n = int(round(np.log2(vals.size)))
    if 2**n != vals.size:
        raise InvalidInput("diagonal length must be a power of two")
    from .mps import mps_from_dense

    if not np.any(vals):
        return zero_mpo(n)
    state = mps_from_dense(vals, chi_max=max_bond, tol=tol)
    cores = []
    for j, c in enumerate(state.cores):
        core = np.zeros((c.shape[0], 2, 2, c.shape[2]), dtype=np.complex128)
        core[:, 0, 0, :] = c[:, 0, :]
        core[:, 1, 1, :] = c[:, 1, :]
        if j == 0:
            core = core * state.norm
        cores.append(core)
    return MPO(tuple(cores))


# ---------------------------------------------------------------------------
# algebra


def mpo_add(a: MPO, b: MPO) -> MPO:
    """Block-diagonal bond concatenation; bonds add."""
    if a.n != b.n:
        raise InvalidInput(f"cannot add MPOs on {a.n} and {b.n} sites")
    if a.n == 1:
        return MPO((a.cores[0] + b.cores[0],))
    cores = []
    for j, (x, y) in enumerate(zip(a.cores, b.cores)):
        if j == 0:
            core = np.concatenate([x, y], axis=3)
        elif j == a.n - 1:
            core = np.concatenate([x, y], axis=0)
        else:
            lx, _, _, rx = x.shape
            ly, _, _, ry = y.shape
            core = np.zeros((lx + ly, 2, 2, rx + ry), dtype=np.complex128)
            core[:lx, :, :, :rx] = x
            core[lx:, :, :, rx:] = y
        cores.append(core)
    return MPO(tuple(cores))


def mpo_scale(a: MPO, s: complex) -> MPO:
    cores = list(a.cores)
    cores[0] = cores[0] * s
    return MPO(tuple(cores))


def mpo_compress(a: MPO, max_bond: int, tol: float) -> MPO:
    """Left-canonicalize with QR, then truncate right-to-left with SVDs.

    Truncation at each of the ``n - 1`` cuts discards singular values whose
    squared tail is at most ``(tol * ||a||_F)**2 / (n - 1)``, so the total
    Frobenius error is bounded by ``tol * ||a||_F`` when ``max_bond`` is not
    binding.
    """
    n = a.n
    if n == 1:
        return a
    cores = [np.array(c) for c in a.cores]
    for j in range(n - 1):
        l, o, i, r = cores[j].shape
        q, rr = np.linalg.qr(cores[j].reshape(l * o * i, r), mode="reduced")
        cores[j] = q.reshape(l, o, i, q.shape[1])
        cores[j + 1] = np.tensordot(rr, cores[j + 1], axes=(1, 0))
    norm = np.linalg.norm(cores[-1])
    if norm == 0.0:
        return zero_mpo(n)
    budget = (tol * norm) ** 2 / (n - 1)
    for j in range(n - 1, 0, -1):
        l, o, i, r = cores[j].shape
        u, s, vh = svd(cores[j].reshape(l, o * i * r))
        tail = np.cumsum((s**2)[::-1])[::-1]  # tail[k] = sum_{m >= k} s_m^2
        keep = len(s)
        for k in range(1, len(s)):
            if tail[k] <= budget:
                keep = k
                break
        keep = max(1, min(keep, max_bond))
        cores[j] = vh[:keep].reshape(keep, o, i, r)
        cores[j - 1] = np.tensordot(cores[j - 1], u[:, :keep] * s[:keep], axes=(3, 0))
    return MPO(tuple(cores))


def mpo_to_dense(a: MPO) -> NDArray[np.complex128]:
    if a.n > MAX_DENSE_SITES:
        raise InvalidInput(f"refusing to densify an MPO on {a.n} > {MAX_DENSE_SITES} sites")
    acc = a.cores[0][0]  # (out, in, r)
    for c in a.cores[1:]:
        # acc: (O, I, r), c: (r, o, i, r')
        acc = np.einsum("OIr,roiR->OoIiR", acc, c)
        O, o, I, i, R = acc.shape
        acc = acc.reshape(O * o, I * i, R)
    return acc[:, :, 0]


def mpo_inner(a: MPO, b: MPO) -> complex:
    """``tr(a^H b)`` contracted site by site."""
    if a.n != b.n:
        raise InvalidInput("site count mismatch")
    env = np.ones((1, 1), dtype=np.complex128)
    for x, y in zip(a.cores, b.cores):
        env = np.einsum("ab,aoic,boid->cd", env, x.conj(), y)
    return complex(env[0, 0])


def mpo_norm(a: MPO) -> float:
    return float(np.sqrt(max(mpo_inner(a, a).real, 0.0)))


def mpo_apply(a: MPO, v: NDArray) -> NDArray[np.complex128]:
    """Matrix-vector product without densifying the operator."""
    # t holds (bond, remaining input bits..., finished output bits...)
    t = np.asarray(v, dtype=np.complex128).reshape(1, -1)
    for c in a.cores:
        l, _, _, r = c.shape
        t = t.reshape(l, 2, -1)
        t = np.einsum("lir,loiR->Rro", t, c)
        t = t.reshape(r, -1)
    return t.reshape(-1)
