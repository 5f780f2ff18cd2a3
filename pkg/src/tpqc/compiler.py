"""Compile an MPO into per-site unitaries acting on a shared auxiliary register.

The target ``M`` is approximated as ``c * Q`` where ``Q`` is an MPO whose
cores, suitably matricized, are isometries:

* first core   ``(1, out, in, Z)``  -> ``2 x 2Z``, rows orthonormal
* interior     ``(Z, out, in, Z)``  -> ``2Z x 2Z``, rows ``(left, out)``
* last core    ``(Z, out, in, 1)``  -> ``2Z x 2``, columns orthonormal

Read as a circuit, the last core runs first: it maps the input qubit and an
all-zero auxiliary register to ``(aux, out)``; interior cores map
``(in, aux) -> (aux, out)`` unitarily and the first core ends with a
postselection of the auxiliary register onto zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .linalg import InvalidInput, NumericalFailure, gram_schmidt_complete, qr_factor, stiefel_residual
from .mpo import MPO, mpo_inner, mpo_to_dense

logger = logging.getLogger(__name__)


class DivergenceError(NumericalFailure):
    """The Riemannian fit blew up; ``diagnostics`` holds the error history."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class IsometricMPO:
    cores: tuple[NDArray[np.complex128], ...]
    Z: int
    c_mpo: float = 1.0
    fit_error: float = float("nan")
    converged: bool = False
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.cores)

    def as_mpo(self) -> MPO:
        return MPO(self.cores)


@dataclass(frozen=True)
class CompiledOperator:
    """Unitaries on ``(system qubit j, aux register)``, ordered MSB-first like the MPO.

    ``gates[j]`` is expressed in the basis ``(out_j, aux)`` for rows and
    ``(in_j, aux)`` for columns, so it can be applied directly as a
    ``(1 + n_aux)``-qubit gate with the system qubit first.  Application order
    in the circuit is ``gates[n-1]`` first and ``gates[0]`` last.
    """

    gates: tuple[NDArray[np.complex128], ...]
    n_aux: int
    c_mpo: float
    fit_error: float
    cores: tuple[NDArray[np.complex128], ...] = field(repr=False, default=())

    @property
    def n(self) -> int:
        return len(self.gates)

    def projected_matrix(self) -> NDArray[np.complex128]:
        """``<0|_aux U |0>_aux`` on the system register, i.e. ``Q`` as a dense matrix."""
        return mpo_to_dense(MPO(self.cores))

    def target_matrix(self) -> NDArray[np.complex128]:
        return self.c_mpo * self.projected_matrix()


# ---------------------------------------------------------------------------
# matricization helpers


def _to_matrix(core: NDArray, j: int, n: int) -> NDArray:
    """Stiefel matricization; the first core is returned conjugate-transposed."""
    l, o, i, r = core.shape
    if j == 0:
        return core.reshape(o, i * r).conj().T
    if j == n - 1:
        return core.reshape(l * o, i)
    return core.reshape(l * o, i * r)


def _from_matrix(mat: NDArray, j: int, n: int, shape: tuple[int, ...]) -> NDArray:
    if j == 0:
        return mat.conj().T.reshape(shape)
    return mat.reshape(shape)


def _core_shape(j: int, n: int, Z: int) -> tuple[int, int, int, int]:
    return (1 if j == 0 else Z, 2, 2, 1 if j == n - 1 else Z)


def stiefel_residuals(q: IsometricMPO) -> list[float]:
    return [stiefel_residual(_to_matrix(c, j, q.n)) for j, c in enumerate(q.cores)]


def _check_Z(Z: int) -> None:
    if Z < 2 or Z & (Z - 1):
        raise InvalidInput(f"Z must be a power of two >= 2, got {Z}")


# ---------------------------------------------------------------------------
# initialization


def _project(core: NDArray, j: int, n: int) -> NDArray:
    """QR projection onto the Stiefel manifold with columns taken in order of decreasing norm.

    Ordering matters for zero-padded cores: the filler directions must be
    orthogonalized against all target columns, not interleaved with them.
    """
    mat = _to_matrix(core, j, n)
    order = np.argsort(-np.linalg.norm(mat, axis=0), kind="stable")
    q, _ = qr_factor(mat[:, order])
    out = np.empty_like(q)
    out[:, order] = q
    return _from_matrix(out, j, n, core.shape)


def init_isometric(target: MPO, Z: int, seed: int | None = 0, warm: bool = True) -> IsometricMPO:
    """Initial isometric cores, either zero-padded target cores projected by QR or random."""
    _check_Z(Z)
    n = target.n
    if n < 2:
        raise InvalidInput("compilation needs at least two sites")
    if Z <= target.max_bond:
        raise InvalidInput(f"Z={Z} must exceed the target bond dimension {target.max_bond}")
    rng = np.random.default_rng(seed)
    cores = []
    for j, t in enumerate(target.cores):
        shape = _core_shape(j, n, Z)
        if warm:
            padded = np.zeros(shape, dtype=np.complex128)
            padded[: t.shape[0], :, :, : t.shape[3]] = t
            # scale-free projection; tiny noise keeps QR away from exact rank deficiency
            padded /= max(np.abs(padded).max(), 1e-300)
            padded += 1e-9 * rng.standard_normal(shape)
        else:
            padded = rng.standard_normal(shape) + 0j
        cores.append(_project(padded, j, n))
    return IsometricMPO(tuple(cores), Z)


# ---------------------------------------------------------------------------
# cost, normalization, gradient


def _left_step(env: NDArray, a: NDArray, b: NDArray) -> NDArray:
    t = np.tensordot(env, b, axes=(1, 0))  # (a, o, i, d)
    return np.tensordot(a.conj(), t, axes=([0, 1, 2], [0, 1, 2]))


def _right_step(env: NDArray, a: NDArray, b: NDArray) -> NDArray:
    t = np.tensordot(b, env, axes=(3, 1))  # (b, o, i, c)
    return np.tensordot(a.conj(), t, axes=([1, 2, 3], [1, 2, 3]))


def _envs(a: tuple[NDArray, ...], b: tuple[NDArray, ...]) -> tuple[list[NDArray], list[NDArray]]:
    """Left/right environments of ``tr(a^H b)``; ``left[j]`` excludes site j."""
    n = len(a)
    left = [np.ones((1, 1), dtype=np.complex128)]
    for j in range(n - 1):
        left.append(_left_step(left[-1], a[j], b[j]))
    right = [np.ones((1, 1), dtype=np.complex128)] * n
    acc = np.ones((1, 1), dtype=np.complex128)
    for j in range(n - 1, 0, -1):
        acc = _right_step(acc, a[j], b[j])
        right[j - 1] = acc
    return left, right


def _inner(a: tuple[NDArray, ...], b: tuple[NDArray, ...]) -> complex:
    env = np.ones((1, 1), dtype=np.complex128)
    for x, y in zip(a, b):
        env = _left_step(env, x, y)
    return complex(env[0, 0])


def _env_tensor(left: NDArray, core: NDArray, right: NDArray) -> NDArray:
    t = np.tensordot(left, core, axes=(1, 0))
    return np.tensordot(t, right, axes=(3, 1))


def optimal_c(q: IsometricMPO | MPO, target: MPO) -> float:
    """Least-squares scale ``Re tr(Q^H M) / ||Q||_F^2`` by tensor contraction."""
    qm = q.as_mpo() if isinstance(q, IsometricMPO) else q
    if qm.n != target.n:
        raise InvalidInput("site count mismatch")
    qq = mpo_inner(qm, qm).real
    if qq <= 0.0:
        raise InvalidInput("degenerate isometric MPO with zero norm")
    return mpo_inner(qm, target).real / qq


def printed_c(q: IsometricMPO | MPO, target: MPO) -> float:
    """``Re tr(Q^H M) / ||M||_F^2``, kept for diagnostics only."""
    qm = q.as_mpo() if isinstance(q, IsometricMPO) else q
    return mpo_inner(qm, target).real / mpo_inner(target, target).real


def fit_error(q: IsometricMPO | MPO, target: MPO, c: float) -> float:
    """``||c Q - M||^2 / ||M||^2`` by contraction."""
    qm = q.as_mpo() if isinstance(q, IsometricMPO) else q
    mm = mpo_inner(target, target).real
    val = c * c * mpo_inner(qm, qm).real - 2 * c * mpo_inner(qm, target).real + mm
    return max(val, 0.0) / mm


def euclidean_gradients(cores: tuple[NDArray, ...], target: MPO, c: float) -> list[NDArray]:
    """``dC/dQ_j^*`` of ``C = ||c Q - M||^2`` for every core (``c`` held fixed)."""
    lq, rq = _envs(cores, cores)
    lm, rm = _envs(cores, target.cores)
    return [
        c * c * _env_tensor(lq[j], cores[j], rq[j]) - c * _env_tensor(lm[j], target.cores[j], rm[j])
        for j in range(len(cores))
    ]


class _StiefelProduct:
    """Product of the per-core Stiefel manifolds; tangent vectors are flat complex arrays."""

    def __init__(self, target: MPO, shapes: list[tuple[int, ...]]):
        self.target = target
        self.n = target.n
        self.shapes = shapes
        self.mm = _inner(target.cores, target.cores).real
        if self.mm == 0.0:
            raise InvalidInput("cannot compile the zero operator")
        mats = [_to_matrix(np.zeros(s, dtype=np.complex128), j, self.n).shape for j, s in enumerate(shapes)]
        self.mat_shapes = mats
        self.offsets = np.cumsum([0] + [r * c for r, c in mats])

    def split(self, v: NDArray) -> list[NDArray]:
        return [v[a:b].reshape(s) for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.mat_shapes)]

    def cores(self, X: list[NDArray]) -> tuple[NDArray, ...]:
        return tuple(_from_matrix(x, j, self.n, self.shapes[j]) for j, x in enumerate(X))

    def evaluate(self, X: list[NDArray]) -> tuple[float, float]:
        """Optimal scale and relative error ``1 - Re tr(Q^H M)^2 / (|Q|^2 |M|^2)``."""
        cs = self.cores(X)
        qq = _inner(cs, cs).real
        qt = _inner(cs, self.target.cores).real
        return qt / qq, max(self.mm - qt * qt / qq, 0.0) / self.mm

    def project(self, X: list[NDArray], v: NDArray) -> NDArray:
        out = []
        for x, g in zip(X, self.split(v)):
            sym = x.conj().T @ g
            out.append((g - 0.5 * x @ (sym + sym.conj().T)).reshape(-1))
        return np.concatenate(out)

    def gradient(self, X: list[NDArray], c: float) -> NDArray:
        """Riemannian gradient of the relative error at fixed ``c`` (optimal ``c`` by the envelope theorem)."""
        grads = euclidean_gradients(self.cores(X), self.target, c)
        # _to_matrix conjugate-transposes the first core; the gradient follows suit
        flat = np.concatenate([_to_matrix(g, j, self.n).reshape(-1) for j, g in enumerate(grads)]) / self.mm
        return self.project(X, flat)

    def retract(self, X: list[NDArray], v: NDArray) -> list[NDArray]:
        return [qr_factor(x + d)[0] for x, d in zip(X, self.split(v))]


def _ip(a: NDArray, b: NDArray) -> float:
    return float(np.vdot(a, b).real)


def _gd_loop(man, X, c, err, lr, max_iters, tol, max_halvings, history):
    """Fixed learning rate, halved on every cost increase and regrown by 1.2x after accepted steps."""
    step = lr
    it = 0
    while err > tol and it < max_iters:
        it += 1
        # scale-free step: the raw gradient carries a 1 / c^2 factor relative to the cores
        g = man.gradient(X, c) * (man.mm / (c * c) if c != 0 else 1.0)
        for _ in range(max_halvings + 1):
            trial = man.retract(X, -step * g)
            c_new, err_new = man.evaluate(trial)
            if err_new <= err:
                break
            step *= 0.5
        else:
            logger.info("riemannian_fit: no descent after %d halvings at iteration %d", max_halvings, it)
            break
        X, c, err = trial, c_new, err_new
        history.append(err)
        step = min(step * 1.2, lr * 8)
    return X, c, err, it, step


def _lbfgs_loop(man, X, c, err, max_iters, tol, memory, history):
    """Riemannian L-BFGS with Armijo backtracking; stored pairs are transported by projection."""
    g = man.gradient(X, c)
    S: list[NDArray] = []
    Y: list[NDArray] = []
    it = 0
    t = 1.0
    while err > tol and it < max_iters:
        it += 1
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = _ip(s, q) / _ip(y, s)
            alphas.append(a)
            q -= a * y
        gamma = _ip(S[-1], Y[-1]) / _ip(Y[-1], Y[-1]) if S else 1.0 / max(np.linalg.norm(g), 1e-300)
        r = gamma * q
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            r += (a - _ip(y, r) / _ip(y, s)) * s
        d = -r
        slope = _ip(g, d)
        if slope >= 0:
            S, Y = [], []
            d = -g * gamma
            slope = _ip(g, d)
        t = 1.0
        while True:
            trial = man.retract(X, t * d)
            c_new, err_new = man.evaluate(trial)
            if err_new <= err + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if err_new > err:
            if not S:
                logger.info("riemannian_fit: line search failed at iteration %d", it)
                break
            S, Y = [], []
            continue
        g_new = man.gradient(trial, c_new)
        s = man.project(trial, t * d)
        y = g_new - man.project(trial, g)
        S = [man.project(trial, v) for v in S]
        Y = [man.project(trial, v) for v in Y]
        if _ip(s, y) > 1e-300:
            S.append(s)
            Y.append(y)
            S, Y = S[-memory:], Y[-memory:]
        X, c, err, g = trial, c_new, err_new, g_new
        history.append(err)
        if not np.isfinite(err):
            break
    return X, c, err, it, t


class _GaussNewtonModel:
    """Normal operator ``J^T J`` of the residual ``r = c Q - M`` in the variables (tangent cores, c).

    ``J v = c sum_k Q[k <- v_k] + dc Q``.  Products are evaluated matrix-free
    with environment sweeps that carry at most one inserted tangent core.
    """

    def __init__(self, man: _StiefelProduct, X: list[NDArray], c: float):
        self.man, self.X, self.c = man, X, c
        self.Q = man.cores(X)
        self.lA, self.rA = _envs(self.Q, self.Q)
        self.lM, self.rM = _envs(self.Q, man.target.cores)
        last = self.Q[-1]
        self.qq = _left_step(self.lA[-1], last, last)[0, 0].real
        self.qm = _left_step(self.lM[-1], last, man.target.cores[-1])[0, 0].real

    def _to_cores(self, v: NDArray) -> list[NDArray]:
        return [_from_matrix(m, j, self.man.n, self.Q[j].shape) for j, m in enumerate(self.man.split(v))]

    def _to_flat(self, cores: list[NDArray]) -> NDArray:
        return np.concatenate([_to_matrix(g, j, self.man.n).reshape(-1) for j, g in enumerate(cores)])

    def gradient(self) -> tuple[NDArray, float]:
        Q, M, c = self.Q, self.man.target.cores, self.c
        g = [
            c * (c * _env_tensor(self.lA[j], Q[j], self.rA[j]) - _env_tensor(self.lM[j], M[j], self.rM[j]))
            for j in range(self.man.n)
        ]
        return self.man.project(self.X, self._to_flat(g)), c * self.qq - self.qm

    def normal(self, v: NDArray, dc: float) -> tuple[NDArray, float]:
        n, Q, c = self.man.n, self.Q, self.c
        V = self._to_cores(v)
        zero = np.zeros((1, 1), dtype=np.complex128)
        lB = [zero]
        for j in range(n - 1):
            lB.append(_left_step(lB[-1], Q[j], Q[j]) + _left_step(self.lA[j], Q[j], V[j]))
        rB = [zero] * n
        acc = zero
        for j in range(n - 1, 0, -1):
            acc = _right_step(acc, Q[j], Q[j]) + _right_step(self.rA[j], Q[j], V[j])
            rB[j - 1] = acc
        out = []
        for j in range(n):
            la, ra = self.lA[j], self.rA[j]
            inserted = _env_tensor(la, V[j], ra) + _env_tensor(lB[j], Q[j], ra) + _env_tensor(la, Q[j], rB[j])
            out.append(c * (c * inserted + dc * _env_tensor(la, Q[j], ra)))
        qv = (_left_step(lB[-1], Q[-1], Q[-1]) + _left_step(self.lA[-1], Q[-1], V[-1]))[0, 0].real
        return self.man.project(self.X, self._to_flat(out)), c * qv + dc * self.qq


def _cg(apply, b: tuple[NDArray, float], lam: float, max_iters: int, rtol: float) -> tuple[NDArray, float]:
    """Conjugate gradients on ``(A + lam I) x = b`` for the (vector, scalar) pair."""
    xv, xc = np.zeros_like(b[0]), 0.0
    rv, rc = b[0].copy(), b[1]
    pv, pc = rv.copy(), rc
    rr = _ip(rv, rv) + rc * rc
    r0 = rr
    for _ in range(max_iters):
        av, ac = apply(pv, pc)
        av = av + lam * pv
        ac = ac + lam * pc
        den = _ip(pv, av) + pc * ac
        if den <= 0:
            break
        a = rr / den
        xv += a * pv
        xc += a * pc
        rv -= a * av
        rc -= a * ac
        rn = _ip(rv, rv) + rc * rc
        if rn <= rtol * rtol * r0:
            break
        pv = rv + (rn / rr) * pv
        pc = rc + (rn / rr) * pc
        rr = rn
    return xv, xc


def _lm_loop(man, X, c, err, max_iters, tol, history, cg_iters=300, cg_rtol=1e-3):
    """Riemannian Levenberg-Marquardt: damped Gauss-Newton steps, QR retraction, monotone acceptance."""
    lam = 1e-2 * man.mm
    floor = 1e-12 * man.mm
    it = 0
    while err > tol and it < max_iters:
        it += 1
        model = _GaussNewtonModel(man, X, c)
        gv, gc = model.gradient()
        dv, _ = _cg(model.normal, (-gv, -gc), lam, cg_iters, cg_rtol)
        trial = man.retract(X, dv)
        c_new, err_new = man.evaluate(trial)
        if err_new < err:
            X, c, err = trial, c_new, err_new
            lam = max(lam / 3.0, floor)
        else:
            lam *= 4.0
            if lam > 1e12 * man.mm:
                logger.info("riemannian_fit: damping exhausted at iteration %d", it)
                break
        history.append(err)
    return X, c, err, it, lam


def riemannian_fit(
    target: MPO,
    Z: int,
    lr: float = 0.1,
    max_iters: int = 500,
    tol: float = 5e-10,
    seed: int | None = 0,
    warm: bool = True,
    init: IsometricMPO | None = None,
    method: str = "lm",
    memory: int = 30,
    max_halvings: int = 20,
) -> IsometricMPO:
    """Minimize ``||c Q - M||^2 / ||M||^2`` over isometric cores, alternating with the optimal ``c``.

    Riemannian gradients use the tangent projection
    ``G = g - Q (Q^H g + g^H Q) / 2`` and the QR retraction ``QR(Q + step)``.
    ``method="gd"`` takes plain gradient steps of size ``lr`` with halving on
    increase; ``method="lbfgs"`` builds quasi-Newton directions from the same
    gradients and backtracks with an Armijo test; ``method="lm"`` (default)
    solves damped Gauss-Newton systems in the tangent space by conjugate
    gradients.  ``max_iters`` counts outer steps.  Every method only accepts
    non-increasing errors, so the returned cores are the best seen.
    """
    q = init if init is not None else init_isometric(target, Z, seed=seed, warm=warm)
    if q.n != target.n:
        raise InvalidInput("initial cores and target differ in site count")
    if method not in ("gd", "lbfgs", "lm"):
        raise InvalidInput(f"unknown method {method!r}")
    man = _StiefelProduct(target, [c.shape for c in q.cores])
    X = [_to_matrix(cj, j, q.n) for j, cj in enumerate(q.cores)]
    c, err = man.evaluate(X)
    start_err = err
    history = [err]
    if method == "gd":
        X, c, err, it, step = _gd_loop(man, X, c, err, lr, max_iters, tol, max_halvings, history)
    elif method == "lbfgs":
        X, c, err, it, step = _lbfgs_loop(man, X, c, err, max_iters, tol, memory, history)
    else:
        X, c, err, it, step = _lm_loop(man, X, c, err, max_iters, tol, history)
    if not np.isfinite(err) or (err > 10 * max(start_err, 1e-300) and err > 1.0):
        raise DivergenceError("Riemannian fit diverged", {"history": history})
    cores = man.cores(X)
    if c < 0:
        cores = (-cores[0],) + tuple(cores[1:])
        c = -c
    diagnostics = {
        "iterations": it,
        "history": history,
        "printed_c": printed_c(MPO(cores), target),
        "final_step": step,
        "method": method,
    }
    return IsometricMPO(tuple(cores), Z, float(c), float(err), bool(err <= tol), diagnostics)


# ---------------------------------------------------------------------------
# unitaries


def raise_to_unitaries(q: IsometricMPO, check_tol: float = 1e-8) -> CompiledOperator:
    """Embed every isometric core in a unitary acting on ``(system qubit, aux)``."""
    n, Z = q.n, q.Z
    res = stiefel_residuals(q)
    if max(res) > check_tol:
        raise InvalidInput(f"cores violate the Stiefel constraints (max residual {max(res):.2e})")
    gates = []
    for j, core in enumerate(q.cores):
        l, _, _, r = core.shape
        if j == 0:
            # rows sigma, cols (in, z); completing rows gives output index (a, sigma)
            u = gram_schmidt_complete(core.reshape(2, 2 * Z), rows=True)
            full = u.reshape(Z, 2, 2, Z)  # (a_out, out, in, a_in)
        elif j == n - 1:
            iso = core.reshape(Z * 2, 2)  # rows (z, out), cols in
            u = gram_schmidt_complete(iso)
            # columns: first two are (in, a_in=0); the rest fill a_in != 0
            full = np.zeros((Z, 2, 2, Z), dtype=np.complex128)
            full[:, :, :, 0] = u[:, :2].reshape(Z, 2, 2)
            rest = u[:, 2:].reshape(Z, 2, 2, Z - 1)
            full[:, :, :, 1:] = rest
        else:
            full = core.reshape(Z, 2, 2, Z)  # (z_left, out, in, z_right) is unitary already
        # reorder to rows (out, aux_out) and cols (in, aux_in)
        gate = full.transpose(1, 0, 2, 3).reshape(2 * Z, 2 * Z)
        gates.append(gate)
    n_aux = int(np.log2(Z))
    return CompiledOperator(tuple(gates), n_aux, q.c_mpo, q.fit_error, tuple(q.cores))


def compile_mpo(target: MPO, Z: int = 16, **kwargs) -> CompiledOperator:
    """Fit and raise in one go; logs a warning when the tolerance is not reached."""
    q = riemannian_fit(target, Z, **kwargs)
    if not q.converged:
        logger.warning("compile_mpo: fit error %.3e above tolerance after %s iterations", q.fit_error, q.diagnostics["iterations"])
    return raise_to_unitaries(q)


def avg_success_probability(comp: CompiledOperator | NDArray, c: float | None = None) -> float:
    """Haar-average postselection probability ``||A||_F^2 / 2^n`` with ``A = M / c``.

    With a ``CompiledOperator`` the projected matrix ``Q`` is used directly
    (``A = Q``); with a plain matrix ``M`` the scale ``c`` defaults to its
    largest singular value, the best any unitary embedding can do.
    """
    if isinstance(comp, CompiledOperator):
        core_mpo = MPO(comp.cores)
        return float(mpo_inner(core_mpo, core_mpo).real / 2**comp.n)
    mat = np.asarray(comp)
    if c is None:
        c = float(np.linalg.norm(mat, 2))
    a = mat / c
    return float(np.sum(np.abs(a) ** 2) / mat.shape[0])


def two_qubit_gate_bound(n: int, Z: int, k: float = 1.0) -> float:
    if n <= 0 or Z <= 0 or k <= 0:
        raise InvalidInput("inputs must be positive")
    return float(k * n * Z * Z)
