"""Exact statevector simulation of the solver circuits.

Qubit ``k`` of a register layout is axis ``k`` of the amplitude tensor, so the
flattened amplitude index is big-endian in qubit order.  System registers are
laid out MSB-first, matching the MPO site order.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .compiler import CompiledOperator
from .linalg import InvalidInput, NumericalFailure

logger = logging.getLogger(__name__)

MAX_QUBITS = 24
DEBUG_DUMP_ENV = "TPQC_DEBUG_DUMP"

X_GATE = np.array([[0.0, 1.0], [1.0, 0.0]])
H_GATE = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
CNOT_GATE = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
CZ_GATE = np.diag([1.0, 1.0, 1.0, -1.0])


def ry(theta: float) -> NDArray[np.float64]:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]])


class PostselectionError(NumericalFailure):
    """Every branch was discarded by a postselection."""


# ---------------------------------------------------------------------------
# registers and states


@dataclass(frozen=True)
class RegisterLayout:
    """Qubit index map: global ancilla, weight ancilla, aux register, system copies (in that order)."""

    n_system: int
    n_aux: int = 0
    has_ancilla: bool = False
    has_weight_ancilla: bool = False
    n_copy: int = 1

    def __post_init__(self):
        if self.n_system < 1 or self.n_aux < 0 or self.n_copy < 1:
            raise InvalidInput("register sizes must be positive")
        if self.total > MAX_QUBITS:
            raise InvalidInput(f"{self.total} qubits exceed the simulator limit of {MAX_QUBITS}")

    @property
    def ancilla(self) -> int:
        if not self.has_ancilla:
            raise InvalidInput("layout has no global ancilla")
        return 0

    @property
    def weight(self) -> int:
        if not self.has_weight_ancilla:
            raise InvalidInput("layout has no weight ancilla")
        return int(self.has_ancilla)

    @property
    def aux(self) -> tuple[int, ...]:
        start = int(self.has_ancilla) + int(self.has_weight_ancilla)
        return tuple(range(start, start + self.n_aux))

    def system(self, copy: int = 0) -> tuple[int, ...]:
        if not 0 <= copy < self.n_copy:
            raise InvalidInput(f"no system copy {copy}")
        start = int(self.has_ancilla) + int(self.has_weight_ancilla) + self.n_aux + copy * self.n_system
        return tuple(range(start, start + self.n_system))

    @property
    def total(self) -> int:
        return int(self.has_ancilla) + int(self.has_weight_ancilla) + self.n_aux + self.n_copy * self.n_system


@dataclass
class StateVector:
    """Amplitude tensor of shape ``(2,) * layout.total``; owned and mutated in place."""

    amplitudes: NDArray[np.complex128]
    layout: RegisterLayout

    @classmethod
    def zeros(cls, layout: RegisterLayout) -> StateVector:
        amp = np.zeros((2,) * layout.total, dtype=np.complex128)
        amp[(0,) * layout.total] = 1.0
        return cls(amp, layout)

    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def flat(self) -> NDArray[np.complex128]:
        return self.amplitudes.reshape(-1)

    def system_vector(self, copy: int = 0) -> NDArray[np.complex128]:
        """System amplitudes with every other qubit fixed to zero."""
        idx = [0] * self.layout.total
        for q in self.layout.system(copy):
            idx[q] = slice(None)
        return self.amplitudes[tuple(idx)].reshape(-1).copy()

    def copy(self) -> StateVector:
        return StateVector(self.amplitudes.copy(), self.layout)


def apply_gate(
    state: StateVector,
    gate: NDArray,
    qubits: Sequence[int],
    controls: Sequence[tuple[int, int]] = (),
) -> StateVector:
    """Apply ``gate`` to ``qubits`` (first qubit most significant), conditioned on ``controls``.

    ``controls`` holds ``(qubit, value)`` pairs; the gate acts only on the
    branch where every control qubit has the given value.
    """
    k = len(qubits)
    if gate.shape != (2**k, 2**k):
        raise InvalidInput(f"gate shape {gate.shape} does not match {k} qubits")
    ctrl = dict(controls)
    if set(ctrl) & set(qubits):
        raise InvalidInput("a qubit cannot be both control and target")
    idx = tuple(ctrl.get(q, slice(None)) for q in range(state.layout.total))
    sub = state.amplitudes[idx]
    # axes of the remaining (uncontrolled) qubits inside ``sub``
    free = [q for q in range(state.layout.total) if q not in ctrl]
    axes = [free.index(q) for q in qubits]
    t = np.moveaxis(sub, axes, range(k))
    shape = t.shape
    t = (gate @ t.reshape(2**k, -1)).reshape(shape)
    state.amplitudes[idx] = np.moveaxis(t, range(k), axes)
    return state


def project(state: StateVector, qubits: Sequence[int]) -> tuple[StateVector, float]:
    """Zero every amplitude with a nonzero bit on ``qubits``; returns the kept probability."""
    before = state.norm2()
    if before == 0.0:
        raise PostselectionError("projection of a zero state")
    mask = np.zeros((2,) * state.layout.total, dtype=bool)
    idx = tuple(0 if q in set(qubits) else slice(None) for q in range(state.layout.total))
    mask[idx] = True
    state.amplitudes[~mask] = 0.0
    prob = state.norm2() / before
    if prob < 1e-14:
        raise PostselectionError(f"postselection kept probability {prob:.3e}")
    return state, prob


def project_aux_zero(state: StateVector) -> tuple[StateVector, float]:
    """Postselect the aux register on all-zero; the state is left unnormalized."""
    return project(state, state.layout.aux)


def debug_dump(state: StateVector, tag: str) -> Path | None:
    """Write raw amplitudes to ``$TPQC_DEBUG_DUMP/<tag>.npy`` when the variable is set."""
    root = os.environ.get(DEBUG_DUMP_ENV)
    if not root:
        return None
    path = Path(root) / f"{tag}.npy"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, state.flat())
    return path


# ---------------------------------------------------------------------------
# brickwall ansatz


class Entangler(str, Enum):
    CNOT = "cnot"
    CZ = "cz"


def brickwall_pairs(n: int, layers: int) -> list[list[tuple[int, int]]]:
    """Qubit pairs per layer: even layers start at qubit 0, odd layers at qubit 1 (open chain)."""
    return [[(q, q + 1) for q in range(layer % 2, n - 1, 2)] for layer in range(layers)]


def brickwall_param_count(n: int, layers: int) -> int:
    return 2 * sum(len(p) for p in brickwall_pairs(n, layers))


@dataclass
class BrickwallAnsatz:
    """Layers of 2-qubit blocks ``RY x RY`` followed by an entangler; ``theta0`` scales the field."""

    n: int
    layers: int
    entangler: Entangler = Entangler.CNOT
    theta: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]
    theta0: float = 1.0

    def __post_init__(self):
        if self.n < 2 or self.layers < 1:
            raise InvalidInput("brickwall needs n >= 2 and at least one layer")
        self.entangler = Entangler(self.entangler)
        count = brickwall_param_count(self.n, self.layers)
        if self.theta is None:
            self.theta = np.zeros(count)
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if self.theta.size != count:
            raise InvalidInput(f"expected {count} parameters, got {self.theta.size}")

    @property
    def n_params(self) -> int:
        return self.theta.size

    def with_theta(self, theta: ArrayLike, theta0: float | None = None) -> BrickwallAnsatz:
        return BrickwallAnsatz(self.n, self.layers, self.entangler, np.array(theta, dtype=float),
                               self.theta0 if theta0 is None else theta0)

    def gates(self) -> Iterator[tuple[str, tuple[int, ...], int]]:
        """Yield ``(kind, qubits, param_index)``; ``param_index`` is -1 for entanglers."""
        p = 0
        for pairs in brickwall_pairs(self.n, self.layers):
            for a, b in pairs:
                yield "ry", (a,), p
                yield "ry", (b,), p + 1
                yield self.entangler.value, (a, b), -1
                p += 2

    def state(self) -> NDArray[np.float64]:
        """Normalized real amplitudes of the prepared state (unit norm, ``theta0`` not applied)."""
        return ansatz_states(self, self.theta[None, :])[0]

    def field(self) -> NDArray[np.float64]:
        return self.theta0 * self.state()


@dataclass(frozen=True)
class BasisState:
    """Computational basis state ``|index>`` prepared with X gates (big-endian bits)."""

    n: int
    index: int

    def __post_init__(self):
        if not 0 <= self.index < 2**self.n:
            raise InvalidInput(f"basis index {self.index} out of range for {self.n} qubits")

    def gates(self) -> Iterator[tuple[str, tuple[int, ...], int]]:
        for q in range(self.n):
            if (self.index >> (self.n - 1 - q)) & 1:
                yield "x", (q,), -1

    def state(self) -> NDArray[np.float64]:
        v = np.zeros(2**self.n)
        v[self.index] = 1.0
        return v


StatePrep = BrickwallAnsatz | BasisState


@lru_cache(maxsize=64)
def _program(n: int, layers: int, entangler: str) -> tuple:
    """Index-permutation form of the ansatz, one fused entangler per layer.

    Blocks inside a layer act on disjoint pairs, so all its RY gates commute
    with the other blocks' entanglers and may run first.  An RY on qubit ``q``
    is ``c psi + s sgn psi[perm]`` with ``perm`` flipping bit ``q``.
    """
    size = 2**n
    idx = np.arange(size)
    ops = []
    p = 0
    for pairs in brickwall_pairs(n, layers):
        for a, b in pairs:
            for q in (a, b):
                bit = 1 << (n - 1 - q)
                ops.append(("ry", p, idx ^ bit, np.where(idx & bit, 1.0, -1.0)))
                p += 1
        perm = idx.copy()
        sign = np.ones(size)
        for a, b in pairs:
            ba, bb = 1 << (n - 1 - a), 1 << (n - 1 - b)
            if entangler == "cnot":
                perm = np.where(perm & ba, perm ^ bb, perm)
            else:
                sign = np.where(((idx & ba) > 0) & ((idx & bb) > 0), -sign, sign)
        ops.append(("ent", -1, perm, sign))
    return tuple(ops)


def _forward(ops: tuple, th: NDArray, psi: NDArray) -> NDArray:
    for kind, p, perm, sign in ops:
        if kind == "ry":
            c = np.cos(th[:, p] / 2)[:, None]
            s = np.sin(th[:, p] / 2)[:, None]
            psi = c * psi + s * sign * psi[:, perm]
        else:
            psi = sign * psi[:, perm]
    return psi


def ansatz_states(ansatz: BrickwallAnsatz, thetas: ArrayLike) -> NDArray[np.float64]:
    """Prepared states for a batch of parameter vectors, shape ``(batch, 2**n)``."""
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    if th.shape[1] != ansatz.n_params:
        raise InvalidInput(f"expected {ansatz.n_params} parameters, got {th.shape[1]}")
    psi = np.zeros((th.shape[0], 2**ansatz.n))
    psi[:, 0] = 1.0
    return _forward(_program(ansatz.n, ansatz.layers, ansatz.entangler.value), th, psi)


@lru_cache(maxsize=64)
def _layer_program(n: int, layers: int, entangler: str) -> tuple:
    """Per layer: RY ``(qubit, param)`` list plus the fused entangler ``(perm, sign)``."""
    ops = _program(n, layers, entangler)
    out, rys = [], []
    for kind, p, perm, sign in ops:
        if kind == "ry":
            rys.append(p)
        else:
            out.append((tuple(rys), perm, sign))
            rys = []
    qubit_of = {}
    for pairs, (params, _, _) in zip(brickwall_pairs(n, layers), out):
        for (a, b), k in zip(pairs, range(0, len(params), 2)):
            qubit_of[params[k]], qubit_of[params[k + 1]] = a, b
    size = 2**n
    idx = np.arange(size)
    flips = np.array([idx ^ (1 << (n - 1 - q)) for q in range(n)])
    signs = np.array([np.where(idx & (1 << (n - 1 - q)), 1.0, -1.0) for q in range(n)])
    layers_out = tuple((params, tuple(qubit_of[p] for p in params), perm, sign) for params, perm, sign in out)
    return layers_out, flips, signs


def _ry_stack(angles: NDArray) -> NDArray:
    c, s = np.cos(angles / 2), np.sin(angles / 2)
    out = np.empty((angles.size, 2, 2))
    out[:, 0, 0] = c
    out[:, 0, 1] = -s
    out[:, 1, 0] = s
    out[:, 1, 1] = c
    return out


def _apply_rys(psi: NDArray, qubits: tuple[int, ...], mats: NDArray) -> NDArray:
    for q, m in zip(qubits, mats):
        psi = (m @ psi.reshape(2**q, 2, -1)).reshape(-1)
    return psi


def overlap_and_gradient(ansatz: BrickwallAnsatz, theta: ArrayLike, target: ArrayLike) -> tuple[float, NDArray[np.float64]]:
    """``<target|psi(theta)>`` and its exact gradient by reverse-mode (adjoint) sweep.

    For a linear functional of an RY circuit this equals the parameter-shift
    gradient; it costs two passes instead of ``2 * n_params`` circuits.
    Layer by layer, the derivative of the RY on qubit ``q`` equals the layer
    applied after ``Y'_q / 2`` with ``Y' = [[0, -1], [1, 0]]`` (both are
    functions of Pauli Y, so they commute).
    """
    th = np.asarray(theta, dtype=float).reshape(-1)
    if th.size != ansatz.n_params:
        raise InvalidInput(f"expected {ansatz.n_params} parameters, got {th.size}")
    lam = np.asarray(target, dtype=float).reshape(-1)
    n = ansatz.n
    prog, flips, signs = _layer_program(n, ansatz.layers, ansatz.entangler.value)
    psi = np.zeros(2**n)
    psi[0] = 1.0
    inputs, mats = [], []
    for params, qubits, perm, sign in prog:
        m = _ry_stack(th[list(params)])
        inputs.append(psi)
        mats.append(m)
        psi = sign * _apply_rys(psi, qubits, m)[perm]
    value = float(lam @ psi)
    grad = np.zeros(th.size)
    for (params, qubits, perm, sign), m, psi_in in zip(reversed(prog), reversed(mats), reversed(inputs)):
        lam = _apply_rys((sign * lam)[perm], qubits[::-1], m[::-1].transpose(0, 2, 1))
        q = list(qubits)
        grad[list(params)] = 0.5 * (signs[q] * psi_in[flips[q]]) @ lam
    return value, grad


def _overlap_and_gradient_gates(ansatz: BrickwallAnsatz, th: NDArray, lam: NDArray) -> tuple[float, NDArray]:
    ops = _program(ansatz.n, ansatz.layers, ansatz.entangler.value)
    psi = np.zeros(2**ansatz.n)
    psi[0] = 1.0
    psi = _forward(ops, th[None, :], psi[None, :])[0]
    value = float(lam @ psi)
    grad = np.zeros(th.size)
    for kind, p, perm, sign in reversed(ops):
        if kind == "ry":
            c, s = np.cos(th[p] / 2), np.sin(th[p] / 2)
            flipped = sign * psi[perm]
            psi = c * psi - s * flipped
            flipped = sign * psi[perm]
            grad[p] = 0.5 * float(lam @ (c * flipped - s * psi))
            lam = c * lam - s * (sign * lam[perm])
        else:
            psi = (sign * psi)[perm]
            lam = (sign * lam)[perm]
    return value, grad


def apply_ansatz(state: StateVector, ansatz: StatePrep, copy: int = 0,
                 controls: Sequence[tuple[int, int]] = ()) -> StateVector:
    """Gate-by-gate application of the ansatz circuit on a system register copy."""
    sysq = state.layout.system(copy)
    if len(sysq) != ansatz.n:
        raise InvalidInput("ansatz width does not match the system register")
    for kind, qs, p in ansatz.gates():
        if kind == "ry":
            apply_gate(state, ry(ansatz.theta[p]), [sysq[qs[0]]], controls)
        elif kind == "x":
            apply_gate(state, X_GATE, [sysq[qs[0]]], controls)
        else:
            gate = CNOT_GATE if kind == "cnot" else CZ_GATE
            apply_gate(state, gate, [sysq[qs[0]], sysq[qs[1]]], controls)
    return state


def prepare_ansatz(ansatz: BrickwallAnsatz) -> StateVector:
    state = StateVector.zeros(RegisterLayout(ansatz.n))
    return apply_ansatz(state, ansatz)


# ---------------------------------------------------------------------------
# compiled operators and Hadamard tests


def apply_compiled(
    state: StateVector,
    comp: CompiledOperator,
    controlled_on: int | None = None,
    copy: int = 0,
    controls: Sequence[tuple[int, int]] = (),
) -> StateVector:
    """Apply the per-site gates, last site first; no projection."""
    lay = state.layout
    if lay.n_aux != comp.n_aux:
        raise InvalidInput(f"aux register has {lay.n_aux} qubits, operator needs {comp.n_aux}")
    sysq = lay.system(copy)
    if len(sysq) != comp.n:
        raise InvalidInput("operator width does not match the system register")
    ctrl = list(controls) + ([(controlled_on, 1)] if controlled_on is not None else [])
    for j in range(comp.n - 1, -1, -1):
        apply_gate(state, comp.gates[j], [sysq[j], *lay.aux], ctrl)
    return state


@dataclass(frozen=True)
class TestOutcome:
    """Exact ancilla statistics of a Hadamard-type test.

    ``p_keep`` holds the joint probabilities of surviving every postselection
    and reading the ancilla as 0 or 1.  Unpacks as ``(sigma_z, alpha_succ)``.
    """

    sigma_z: float
    alpha_succ: float
    p_keep: tuple[float, float]

    def __iter__(self):
        return iter((self.sigma_z, self.alpha_succ))

    @property
    def survival(self) -> float:
        return self.p_keep[0] + self.p_keep[1]


def _finish_test(state: StateVector, phi: float, post: Sequence[int]) -> TestOutcome:
    anc = state.layout.ancilla
    project(state, post)
    # RY(+phi) in our RY convention; with RY(-phi) the cos term flips sign and
    # <sigma_z> no longer reaches 1 at the optimal angle
    apply_gate(state, ry(phi), [anc])
    amp = np.moveaxis(state.amplitudes, anc, 0).reshape(2, -1)
    p0, p1 = (float(np.vdot(a, a).real) for a in amp)
    survival = p0 + p1
    if survival < 1e-14:
        raise PostselectionError("no branch survived the postselection")
    # the reference branch survives with weight 1/2, the operator branch with alpha/2
    alpha = 2.0 * survival - 1.0
    return TestOutcome((p0 - p1) / survival, alpha, (p0, p1))


def _check_phi(phi: float) -> None:
    if not 0.0 < phi <= np.pi / 2 + 1e-12:
        raise InvalidInput(f"phi must lie in (0, pi/2], got {phi}")


def hadamard_test(
    bra: BrickwallAnsatz,
    op_chain: Sequence[CompiledOperator],
    ket: StatePrep,
    phi: float = np.pi / 2,
) -> TestOutcome:
    """Ancilla ``|1>``, H, reference branch ``bra`` (ancilla 0) against ``P U_chain ket`` (ancilla 1), then ``RY(phi)``.

    The result satisfies
    ``<sigma_z> = [2 sin(phi) Re<a|b> - cos(phi) (alpha - 1)] / (1 + alpha)``
    with ``a`` the bra state and ``b = P U_chain |ket>``.

    The aux register is shared by the chain; it is projected after every
    operator, which is equivalent to a single final projection of fresh
    registers since a projected register is back in ``|0...0>``.
    """
    _check_phi(phi)
    n_aux = op_chain[0].n_aux if op_chain else 0
    if any(op.n_aux != n_aux for op in op_chain):
        raise InvalidInput("operators in a chain must share the aux width")
    lay = RegisterLayout(bra.n, n_aux, has_ancilla=True)
    state = StateVector.zeros(lay)
    anc = lay.ancilla
    apply_gate(state, X_GATE, [anc])
    apply_gate(state, H_GATE, [anc])
    apply_ansatz(state, bra, controls=[(anc, 0)])
    apply_ansatz(state, ket, controls=[(anc, 1)])
    for op in op_chain:
        apply_compiled(state, op, controlled_on=anc)
        project_aux_zero(state)
    return _finish_test(state, phi, lay.aux)


def pointwise_branch_layout(n: int, n_aux: int) -> RegisterLayout:
    return RegisterLayout(n, n_aux, has_ancilla=True, has_weight_ancilla=True, n_copy=2)


def nonlinear_test(
    bra: BrickwallAnsatz,
    lin: CompiledOperator,
    nonlin: CompiledOperator,
    ket: BrickwallAnsatz,
    phi: float,
    phi_u: float,
) -> TestOutcome:
    """Hadamard test of ``bra`` against the weighted linear plus pointwise-product branch.

    Inside the ancilla-1 branch: the weight qubit is rotated by ``RY(phi_u)``;
    its 0 branch applies ``lin`` to the ket, its 1 branch prepares a second
    ket copy, applies ``nonlin`` there and copies register 1 onto it with a
    CNOT ladder.  A final Hadamard on the weight qubit and postselection of
    weight, aux and the copy register on zero leave
    ``(cos(phi_u/2) lin u + sin(phi_u/2) u * (nonlin u)) / sqrt(2)`` on register 1.
    """
    _check_phi(phi)
    if lin.n_aux != nonlin.n_aux:
        raise InvalidInput("linear and nonlinear operators must share the aux width")
    lay = pointwise_branch_layout(bra.n, lin.n_aux)
    state = StateVector.zeros(lay)
    anc, w = lay.ancilla, lay.weight
    on = (anc, 1)
    apply_gate(state, X_GATE, [anc])
    apply_gate(state, H_GATE, [anc])
    apply_ansatz(state, bra, controls=[(anc, 0)])
    apply_ansatz(state, ket, controls=[on])
    apply_gate(state, ry(phi_u), [w], [on])
    apply_compiled(state, lin, controls=[on, (w, 0)])
    apply_ansatz(state, ket, copy=1, controls=[on, (w, 1)])
    apply_compiled(state, nonlin, copy=1, controls=[on, (w, 1)])
    for a, b in zip(lay.system(0), lay.system(1)):
        apply_gate(state, CNOT_GATE, [a, b], [on, (w, 1)])
    apply_gate(state, H_GATE, [w], [on])
    return _finish_test(state, phi, [w, *lay.aux, *lay.system(1)])


def operator_branch(ket: StatePrep, op_chain: Sequence[CompiledOperator]) -> NDArray[np.complex128]:
    """Unnormalized postselected system state ``P U_chain |ket>``; its squared norm is ``alpha``."""
    n_aux = op_chain[0].n_aux if op_chain else 0
    if any(op.n_aux != n_aux for op in op_chain):
        raise InvalidInput("operators in a chain must share the aux width")
    state = StateVector.zeros(RegisterLayout(ket.n, n_aux))
    apply_ansatz(state, ket)
    for op in op_chain:
        apply_compiled(state, op)
        project(state, state.layout.aux)
    return state.system_vector()


def pointwise_branch(
    ket: BrickwallAnsatz, lin: CompiledOperator, nonlin: CompiledOperator, phi_u: float
) -> NDArray[np.complex128]:
    """Postselected register-1 state of the weighted linear plus pointwise-product circuit.

    Equals ``(cos(phi_u/2) lin u + sin(phi_u/2) u * (nonlin u)) / sqrt(2)``
    with ``u`` the prepared ket state.
    """
    if lin.n_aux != nonlin.n_aux:
        raise InvalidInput("linear and nonlinear operators must share the aux width")
    lay = RegisterLayout(ket.n, lin.n_aux, has_weight_ancilla=True, n_copy=2)
    state = StateVector.zeros(lay)
    w = lay.weight
    apply_ansatz(state, ket)
    apply_gate(state, ry(phi_u), [w])
    apply_compiled(state, lin, controls=[(w, 0)])
    apply_ansatz(state, ket, copy=1, controls=[(w, 1)])
    apply_compiled(state, nonlin, copy=1, controls=[(w, 1)])
    for a, b in zip(lay.system(0), lay.system(1)):
        apply_gate(state, CNOT_GATE, [a, b], [(w, 1)])
    apply_gate(state, H_GATE, [w])
    project(state, [w, *lay.aux, *lay.system(1)])
    return state.system_vector(0)


def outcome_from_branch(bra_state: ArrayLike, branch: ArrayLike, phi: float) -> TestOutcome:
    """Ancilla statistics of the Hadamard test implied by the two branch states.

    Uses ``<sigma_z> = [2 sin(phi) Re<a|b> - cos(phi) (alpha - 1)] / (1 + alpha)``
    with ``alpha = ||b||^2``; agrees with the gate-level tests.
    """
    _check_phi(phi)
    a = np.asarray(bra_state)
    b = np.asarray(branch)
    alpha = float(np.vdot(b, b).real)
    r = float(np.vdot(a, b).real)
    sigma = (2 * np.sin(phi) * r - np.cos(phi) * (alpha - 1)) / (1 + alpha)
    survival = (1 + alpha) / 2
    p0 = survival * (1 + sigma) / 2
    return TestOutcome(sigma, alpha, (p0, survival - p0))


def sampled_sigma_z(outcome: TestOutcome, shots: int, seed: int | None = None) -> tuple[float, int]:
    """Shot estimate: survivors ~ Binomial(shots, survival), then ancilla reads among survivors.

    ``kept / shots`` estimates the survival probability ``(1 + alpha) / 2``.
    """
    if shots < 1:
        raise InvalidInput("shots must be >= 1")
    rng = np.random.default_rng(seed)
    kept = int(rng.binomial(shots, min(outcome.survival, 1.0)))
    if kept == 0:
        raise PostselectionError("no shot survived the postselection")
    p1 = outcome.p_keep[1] / outcome.survival
    ones = int(rng.binomial(kept, min(max(p1, 0.0), 1.0)))
    return (kept - 2 * ones) / kept, kept


def alpha_from_kept(kept: int, shots: int) -> float:
    return 2.0 * kept / shots - 1.0


# ---------------------------------------------------------------------------
# gradients


def parameter_shift_grad(cost: Callable[[NDArray], float], theta: ArrayLike,
                         frequency: float = 1.0) -> NDArray[np.float64]:
    """Two-term shift rule, exact for costs that are sinusoids of ``frequency`` in every angle.

    Expectation values of RY circuits have frequency 1 and use the familiar
    ``(C(theta + pi/2) - C(theta - pi/2)) / 2``.  Quantities linear in the
    ansatz amplitudes (overlaps, the Hadamard-test readout as a function of
    the bra angles) have frequency 1/2 and need shifts of ``pi``.
    """
    if frequency <= 0:
        raise InvalidInput("frequency must be positive")
    th = np.asarray(theta, dtype=float)
    shift = np.pi / (2 * frequency)
    grad = np.empty(th.size)
    for i in range(th.size):
        e = np.zeros(th.size)
        e[i] = shift
        grad[i] = frequency * (cost(th + e) - cost(th - e)) / 2
    return grad


def spsa_grad(cost: Callable[[NDArray], float], theta: ArrayLike, c_shift: float,
              seed: int | np.random.Generator | None = None) -> NDArray[np.float64]:
    """Two-evaluation simultaneous-perturbation estimate with Rademacher directions."""
    if c_shift <= 0:
        raise InvalidInput("c_shift must be positive")
    rng = np.random.default_rng(seed)
    th = np.asarray(theta, dtype=float)
    delta = rng.choice([-1.0, 1.0], size=th.size)
    diff = cost(th + c_shift * delta) - cost(th - c_shift * delta)
    return diff / (2.0 * c_shift) * delta
