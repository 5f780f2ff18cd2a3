"""Variational time stepping: norm bookkeeping, per-step training and dense reference solvers.

A field is stored as ``theta0 * |psi(theta)>`` with a brickwall ansatz state.
Each step trains new angles against the postselected operator branch and
recovers the new norm from the (adapted) Hadamard-test readout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize

from .compiler import CompiledOperator, compile_mpo
from .config import ModeConfig, OptimizerConfig
from .linalg import InvalidInput, NumericalFailure
from .mpo import (
    MPO,
    Boundary,
    backward_first,
    central_first,
    central_second,
    forward_first,
    identity_mpo,
    mpo_add,
    mpo_compress,
    mpo_scale,
    mpo_to_dense,
    sponge_mpo,
    staggered_backward_8th,
    staggered_forward_8th,
    stencil_mpo,
)
from .simulator import (
    BasisState,
    BrickwallAnsatz,
    TestOutcome,
    alpha_from_kept,
    ansatz_states,
    hadamard_test,
    nonlinear_test,
    operator_branch,
    outcome_from_branch,
    overlap_and_gradient,
    pointwise_branch,
    sampled_sigma_z,
)

logger = logging.getLogger(__name__)

MAX_REFERENCE_SITES = 14
BLOWUP = 1e6
ZERO_NORM = 1e-300


class StepFailure(NumericalFailure):
    """A step missed the fidelity threshold; carries the best state found."""

    def __init__(self, message: str, state: SolverState | None = None, substep: int | None = None,
                 fidelity: float | None = None):
        super().__init__(message)
        self.state = state
        self.substep = substep
        self.fidelity = fidelity


class StabilityError(NumericalFailure):
    """The dense reference run blew up."""


# ---------------------------------------------------------------------------
# closed forms


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0 + 1e-12:
        raise InvalidInput(f"alpha must lie in (0, 1], got {alpha}")


def _check_phi(phi: float) -> None:
    if not 0.0 < phi <= math.pi / 2 + 1e-12:
        raise InvalidInput(f"phi must lie in (0, pi/2], got {phi}")


def norm_constant_f(alpha: float, phi: float) -> float:
    """``f = (1 + alpha) / (2 sin(phi) - (sqrt(alpha) - 1/sqrt(alpha)) cos(phi))``."""
    _check_alpha(alpha)
    _check_phi(phi)
    s = math.sqrt(alpha)
    denom = 2 * math.sin(phi) - (s - 1 / s) * math.cos(phi)
    if denom <= 0:
        raise InvalidInput(f"non-positive denominator {denom} for alpha={alpha}, phi={phi}")
    return (1 + alpha) / denom


def phi_opt(alpha: float) -> float:
    """Ancilla angle that makes ``<sigma_z> = 1`` for a perfectly trained step."""
    _check_alpha(alpha)
    return 2 * math.atan(math.sqrt(min(alpha, 1.0)))


def alpha_from_phi(phi: float) -> float:
    _check_phi(phi)
    return math.tan(phi / 2) ** 2


def sigma_z_from_overlap(r: float, alpha: float, phi: float) -> float:
    """Ancilla readout for branch overlap ``r = Re<a|b>`` and success probability ``alpha = ||b||^2``."""
    return (2 * math.sin(phi) * r - math.cos(phi) * (alpha - 1)) / (1 + alpha)


def overlap_from_expectation(sigma_z: float, alpha: float, phi: float) -> float:
    """Exact inverse of :func:`sigma_z_from_overlap`, valid for any training quality."""
    _check_phi(phi)
    return (sigma_z * (1 + alpha) + math.cos(phi) * (alpha - 1)) / (2 * math.sin(phi))


def expectation_from_fidelity(fidelity: float, alpha: float, phi: float) -> float:
    """Readout produced by a step of fidelity ``F`` (non-negative overlap branch)."""
    return sigma_z_from_overlap(math.sqrt(alpha * fidelity), alpha, phi)


def fidelity_from_expectation(sigma_z: float, alpha: float, phi: float) -> float:
    """``F = (a s + a cos + s - cos)^2 / (4 a sin^2)``, clipped to ``[0, 1]``."""
    _check_alpha(alpha)
    _check_phi(phi)
    c, s = math.cos(phi), math.sin(phi)
    value = (alpha * sigma_z + alpha * c + sigma_z - c) ** 2 / (4 * alpha * s * s)
    clipped = min(max(value, 0.0), 1.0)
    if clipped != value:
        logger.debug("fidelity clipped by %.3e", value - clipped)
    return clipped


def phi_u_weight(theta0: float, c_nonlin: float, c_lin: float) -> float:
    """Weight-qubit angle ``2 arctan(theta0 |c_nl| / |c_lin|)``."""
    if c_lin == 0:
        raise InvalidInput("c_lin must be nonzero")
    return 2 * math.atan(theta0 * abs(c_nonlin) / abs(c_lin))


def r_u_correction(k_u: float, phi_u: float) -> float:
    """``k_u / k_u^QC`` with ``k_u^QC = sin(phi_u / 2)``; tends to 1 as both vanish."""
    k_qc = math.sin(phi_u / 2)
    if k_qc == 0.0:
        if k_u != 0.0:
            raise InvalidInput("k_u^QC vanishes while k_u does not")
        return 1.0
    return k_u / k_qc


def update_norm_linear(theta0: float, c_mpo: float, f: float, sigma_z: float) -> float:
    value = theta0 * c_mpo * f * sigma_z
    if not value > 0:
        raise NumericalFailure(f"non-positive norm update {value}")
    return value


def update_norm_nonlinear(theta0: float, c_lin: float, f: float, r_u: float, sigma_z: float) -> float:
    value = theta0 * math.sqrt(2.0) * c_lin * f * r_u * sigma_z
    if not value > 0:
        raise NumericalFailure(f"non-positive norm update {value}")
    return value


def relative_error(qds_field: ArrayLike, classical_field: ArrayLike) -> float:
    """``1 - |(a, b)|^2 / (||a||^2 ||b||^2)``; invariant under rescaling either field."""
    a = np.asarray(qds_field).reshape(-1)
    b = np.asarray(classical_field).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInput("fields differ in length")
    na, nb = float(np.vdot(a, a).real), float(np.vdot(b, b).real)
    if na <= 0 or nb <= 0:
        raise InvalidInput("relative error needs nonzero fields")
    value = 1.0 - abs(np.vdot(a, b)) ** 2 / (na * nb)
    return float(min(max(value, 0.0), 1.0))


# ---------------------------------------------------------------------------
# problems


class ProblemKind(str, Enum):
    ADVECTION_DIFFUSION = "advection_diffusion"
    BURGERS = "burgers"
    LINEAR_EULER = "linear_euler"
    CUSTOM = "custom"


@dataclass(frozen=True)
class Term:
    """``weight * op(field)``; ``op`` names an entry of ``PDEProblem.targets``, ``None`` is the identity."""

    weight: float
    op: str | None
    field: str


@dataclass(frozen=True)
class PointSource:
    """``amplitude * sin(omega t) * e_index`` added to the time derivative of ``field``."""

    field: str
    amplitude: float
    omega: float
    index: int

    def vector(self, t: float, size: int) -> NDArray[np.float64]:
        v = np.zeros(size)
        v[self.index] = self.amplitude * math.sin(self.omega * t)
        return v


@dataclass
class PDEProblem:
    """Discretized PDE with its operator MPOs.

    ``scheme`` selects the update rule.  ``euler``: ``u' = sum(step terms)``
    with, for Burgers-type problems, ``u' += u * (nonlin u)``.  ``rk4``:
    classical RK4 on ``du/dt = sum(rhs terms) + source``.
    """

    name: ProblemKind
    n: int
    dx: float
    dt: float
    x: NDArray[np.float64]
    boundary: Boundary
    constants: dict[str, float]
    targets: dict[str, MPO]
    initial: dict[str, NDArray[np.float64]]
    scheme: str = "euler"
    step_terms: dict[str, list[Term]] = field(default_factory=dict)
    nonlinear: tuple[str, str] | None = None
    rhs: dict[str, list[Term]] = field(default_factory=dict)
    source: PointSource | None = None
    operators: dict[str, CompiledOperator] = field(default_factory=dict)

    @property
    def fields(self) -> list[str]:
        return list(self.initial)

    @property
    def size(self) -> int:
        return 2**self.n

    def dense(self, op: str | None) -> NDArray[np.float64]:
        if op is None:
            return np.eye(self.size)
        return mpo_to_dense(self.targets[op]).real

    def check_operators(self, tol: float) -> None:
        """Every compiled operator present, sized ``n`` and within ``tol`` fit error."""
        for name in self.targets:
            comp = self.operators.get(name)
            if comp is None:
                raise InvalidInput(f"operator {name!r} has not been compiled")
            if comp.n != self.n:
                raise InvalidInput(f"operator {name!r} acts on {comp.n} qubits, problem has {self.n}")
            if not comp.fit_error <= tol:
                raise InvalidInput(f"operator {name!r} fit error {comp.fit_error:.3e} above {tol:.1e}")


def gaussian(x: NDArray, center: float, sigma: float) -> NDArray[np.float64]:
    return np.exp(-((x - center) ** 2) / sigma)


def _sum(a: MPO, b: MPO) -> MPO:
    return mpo_compress(mpo_add(a, b), 64, 1e-14)


def advection_diffusion(n: int, nu: float = 0.1, c_adv: float = 20.0, dt: float = 2.5e-4,
                        sigma: float = 0.5) -> PDEProblem:
    """Periodic ``u_t = nu u_xx - c u_x`` on ``[0, 2 pi)``, explicit Euler, one fused operator."""
    dx = 2 * math.pi / 2**n
    x = np.arange(2**n) * dx
    d1 = stencil_mpo(central_first(dx, Boundary.PERIODIC), n)
    d2 = stencil_mpo(central_second(dx, Boundary.PERIODIC), n)
    step = _sum(identity_mpo(n), mpo_scale(_sum(mpo_scale(d2, nu), mpo_scale(d1, -c_adv)), dt))
    return PDEProblem(ProblemKind.ADVECTION_DIFFUSION, n, dx, dt, x, Boundary.PERIODIC,
                      {"nu": nu, "c_adv": c_adv, "sigma": sigma}, {"step": step},
                      {"u": gaussian(x, math.pi, sigma)}, "euler",
                      step_terms={"u": [Term(1.0, "step", "u")]})


def burgers(n: int, nu: float = 0.001, dt: float | None = None, sigma: float = 0.5) -> PDEProblem:
    """Periodic ``u_t = -u u_x + nu u_xx``: backward first derivative, central second derivative."""
    dx = 2 * math.pi / 2**n
    dt = 0.5 * dx if dt is None else dt
    x = np.arange(2**n) * dx
    d2 = stencil_mpo(central_second(dx, Boundary.PERIODIC), n)
    db = stencil_mpo(backward_first(dx, Boundary.PERIODIC), n)
    lin = _sum(identity_mpo(n), mpo_scale(d2, dt * nu))
    nonlin = mpo_scale(db, -dt)
    return PDEProblem(ProblemKind.BURGERS, n, dx, dt, x, Boundary.PERIODIC,
                      {"nu": nu, "sigma": sigma}, {"lin": lin, "nonlin": nonlin},
                      {"u": gaussian(x, math.pi, sigma)}, "euler",
                      step_terms={"u": [Term(1.0, "lin", "u")]}, nonlinear=("lin", "nonlin"))


def linear_euler(n: int = 6, dt: float = 2.5e-4, rho: float = 1.225, c_sound: float = 340.2,
                 omega: float = 100.0, amplitude: float | None = None, gamma_max: float = 1500.0,
                 kappa: float = 0.13, n_tilde: int = 4, stencil: str = "first") -> PDEProblem:
    """Acoustic pressure/velocity system on ``[-4, 4)`` with a central point source and sponge edges.

    ``p_t = -rho c^2 Df u + src - gamma p`` and ``u_t = -(1/rho) Db p - gamma u``
    on a staggered Dirichlet grid, ``gamma = gamma_max * sponge``.
    """
    size = 2**n
    dx = 8.0 / size
    x = -4.0 + np.arange(size) * dx
    amplitude = 0.4 * c_sound if amplitude is None else amplitude
    if stencil == "first":
        df, db = forward_first(dx), backward_first(dx)
    elif stencil == "eighth":
        df, db = staggered_forward_8th(dx), staggered_backward_8th(dx)
    else:
        raise InvalidInput(f"unknown stencil {stencil!r}")
    targets = {"Df": stencil_mpo(df, n), "Db": stencil_mpo(db, n), "sponge": sponge_mpo(kappa, n_tilde, n)}
    rhs = {
        "p": [Term(-rho * c_sound**2, "Df", "u"), Term(-gamma_max, "sponge", "p")],
        "u": [Term(-1.0 / rho, "Db", "p"), Term(-gamma_max, "sponge", "u")],
    }
    consts = {"rho": rho, "c_sound": c_sound, "omega": omega, "amplitude": amplitude,
              "gamma_max": gamma_max, "kappa": kappa, "n_tilde": n_tilde}
    return PDEProblem(ProblemKind.LINEAR_EULER, n, dx, dt, x, Boundary.DIRICHLET, consts, targets,
                      {"p": np.zeros(size), "u": np.zeros(size)}, "rk4", rhs=rhs,
                      source=PointSource("p", amplitude, omega, size // 2))


def compile_problem(problem: PDEProblem, Z: int = 16, compile_fn: Callable[[str, MPO], CompiledOperator] | None = None,
                    **fit_kwargs) -> PDEProblem:
    """Compile every target MPO (``compile_fn`` may add caching); returns the same problem."""
    for name, target in problem.targets.items():
        if name in problem.operators:
            continue
        if compile_fn is not None:
            problem.operators[name] = compile_fn(name, target)
        else:
            problem.operators[name] = compile_mpo(target, Z, **fit_kwargs)
    return problem


# ---------------------------------------------------------------------------
# dense reference


RK4_STAGES = ((1.0, 0.5, 0.0), (1.0, 0.5, 0.5), (1.0, 1.0, 0.5), (-1.0 / 3.0, 1.0 / 6.0, 1.0))
RK4_FINAL = (1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 1.0)


def _dense_ops(problem: PDEProblem) -> dict[str | None, NDArray]:
    ops: dict[str | None, NDArray] = {name: problem.dense(name) for name in problem.targets}
    ops[None] = np.eye(problem.size)
    return ops


def _dense_rhs(problem: PDEProblem, ops: dict, fields: dict[str, NDArray], t: float) -> dict[str, NDArray]:
    out = {}
    for f in problem.fields:
        g = np.zeros(problem.size)
        for term in problem.rhs.get(f, []):
            g = g + term.weight * (ops[term.op] @ fields[term.field])
        if problem.source is not None and problem.source.field == f:
            g = g + problem.source.vector(t, problem.size)
        out[f] = g
    return out


def dense_step(problem: PDEProblem, fields: dict[str, NDArray], t: float,
               ops: dict | None = None) -> dict[str, NDArray]:
    """One step of the classical scheme with the exact operator matrices."""
    ops = _dense_ops(problem) if ops is None else ops
    if problem.scheme == "euler":
        out = {}
        for f in problem.fields:
            v = sum(term.weight * (ops[term.op] @ fields[term.field]) for term in problem.step_terms[f])
            if problem.nonlinear is not None:
                v = v + fields[f] * (ops[problem.nonlinear[1]] @ fields[f])
            out[f] = np.asarray(v, dtype=float)
        return out
    dt = problem.dt
    stages = []
    prev = fields
    for c_st, c_rk, tau in RK4_STAGES:
        g = _dense_rhs(problem, ops, prev, t + tau * dt)
        prev = {f: c_st * fields[f] + c_rk * dt * g[f] for f in problem.fields}
        stages.append(prev)
    return {f: sum(w * s[f] for w, s in zip(RK4_FINAL, stages)) for f in problem.fields}


def classical_reference(problem: PDEProblem, steps: int,
                        initial: dict[str, NDArray] | None = None) -> list[dict[str, NDArray]]:
    """Dense trajectory ``[fields(t_0), ..., fields(t_steps)]`` with identical stencils and source."""
    if problem.n > MAX_REFERENCE_SITES:
        raise InvalidInput(f"dense reference limited to n <= {MAX_REFERENCE_SITES}")
    ops = _dense_ops(problem)
    fields = {f: np.array(v, dtype=float) for f, v in (initial or problem.initial).items()}
    scale = max(max(np.linalg.norm(v) for v in fields.values()), 1.0)
    out = [fields]
    for j in range(steps):
        fields = dense_step(problem, fields, j * problem.dt, ops)
        norm = max(np.linalg.norm(v) for v in fields.values())
        if not np.isfinite(norm) or norm > BLOWUP * scale:
            raise StabilityError(f"dense reference blew up at step {j + 1}")
        out.append(fields)
    return out


# ---------------------------------------------------------------------------
# state and reports


@dataclass
class SolverState:
    """Angles and norms per field; a field is ``theta0 * psi(theta)``.

    ``theta0`` is positive for nonzero fields (signs live in the angles) and
    exactly zero for a field that vanishes identically.
    """

    theta: dict[str, NDArray[np.float64]]
    theta0: dict[str, float]
    n: int
    layers: int
    entangler: str = "cnot"
    t: float = 0.0
    step: int = 0
    metrics: dict = field(default_factory=dict)

    def ansatz(self, name: str) -> BrickwallAnsatz:
        return BrickwallAnsatz(self.n, self.layers, self.entangler, self.theta[name], self.theta0[name])

    def field_values(self, name: str) -> NDArray[np.float64]:
        if self.theta0[name] == 0.0:
            return np.zeros(2**self.n)
        return self.theta0[name] * self.ansatz(name).state()

    def fields(self) -> dict[str, NDArray[np.float64]]:
        return {f: self.field_values(f) for f in self.theta}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    """Outcome of fitting the ansatz to a target direction.

    ``fidelity`` is ``(Re<psi|T>)^2 / ||T||^2`` at the returned angles,
    ``warm_fidelity`` the same at the initial guess.
    """

    theta: NDArray[np.float64]
    fidelity: float
    warm_fidelity: float
    evaluations: int
    history: list[float] = field(default_factory=list)


class _Objective:
    """Normalized overlap ``Re<psi(theta)|T> / ||T||`` and its gradient.

    ``components`` are ``(weight, branch)`` pairs with ``T = sum weight * branch``.
    Exact mode evaluates the overlap with the assembled target; shots mode
    samples one Hadamard test per component and inverts each readout.
    """

    def __init__(self, ansatz: BrickwallAnsatz, components: Sequence[tuple[float, NDArray]],
                 optimizer: OptimizerConfig, mode: ModeConfig, rng: np.random.Generator):
        self.ansatz = ansatz
        self.components = [(float(w), np.asarray(b)) for w, b in components]
        total = sum(w * b for w, b in self.components)
        self.norm = float(np.linalg.norm(total))
        if self.norm <= ZERO_NORM:
            raise InvalidInput("target vanishes")
        self.direction = np.real(total) / self.norm
        self.gradient_kind = optimizer.gradient
        self.mode = mode
        self.rng = rng
        self.evaluations = 0
        self.alphas = [float(np.vdot(b, b).real) for _, b in self.components]

    def exact(self, theta: NDArray) -> float:
        return float(self.direction @ ansatz_states(self.ansatz, theta[None, :])[0])

    def fidelity(self, theta: NDArray) -> float:
        return min(self.exact(theta) ** 2, 1.0)

    def _sampled_batch(self, thetas: NDArray) -> NDArray:
        states = ansatz_states(self.ansatz, thetas)
        out = np.zeros(len(states))
        for (w, b), alpha in zip(self.components, self.alphas):
            phi = phi_opt(min(max(alpha, 1e-12), 1.0))
            for i, psi in enumerate(states):
                sigma, kept = sampled_sigma_z(outcome_from_branch(psi, b, phi), self.mode.shots, self.rng)
                a_hat = min(max(alpha_from_kept(kept, self.mode.shots), 1e-12), 1.0)
                out[i] += w * overlap_from_expectation(sigma, a_hat, phi)
        return out / self.norm

    def value(self, theta: NDArray) -> float:
        self.evaluations += 1
        if self.mode.kind == "shots":
            return float(self._sampled_batch(theta[None, :])[0])
        return self.exact(theta)

    def value_and_grad(self, theta: NDArray) -> tuple[float, NDArray]:
        self.evaluations += 1
        if self.mode.kind == "exact" and self.gradient_kind == "adjoint":
            return overlap_and_gradient(self.ansatz, theta, self.direction)
        # parameter shift: overlaps have frequency 1/2 per angle, so shifts of pi
        p = theta.size
        shifts = np.vstack([theta, theta + np.pi * np.eye(p), theta - np.pi * np.eye(p)])
        if self.mode.kind == "shots":
            vals = self._sampled_batch(shifts)
        else:
            vals = ansatz_states(self.ansatz, shifts) @ self.direction
        return float(vals[0]), 0.25 * (vals[1:p + 1] - vals[p + 1:])

    def spsa(self, theta: NDArray, shift: float) -> tuple[float, NDArray]:
        self.evaluations += 1
        delta = self.rng.choice([-1.0, 1.0], size=theta.size)
        vals = (self._sampled_batch if self.mode.kind == "shots" else
                lambda th: ansatz_states(self.ansatz, th) @ self.direction)(
            np.vstack([theta, theta + shift * delta, theta - shift * delta]))
        return float(vals[0]), (vals[1] - vals[2]) / (2 * shift) * delta


def _adam(obj: _Objective, theta: NDArray, lr: float, epochs: int, optimizer: OptimizerConfig,
          history: list[float]) -> NDArray:
    """Adam ascent on the overlap; keeps the best iterate, stops early once converged (exact mode)."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    best, best_val = theta.copy(), -np.inf
    exact = obj.mode.kind == "exact"
    for k in range(1, epochs + 1):
        if optimizer.kind == "spsa":
            val, g = obj.spsa(theta, optimizer.spsa_shift)
        else:
            val, g = obj.value_and_grad(theta)
        if val > best_val:
            best, best_val = theta.copy(), val
        history.append(val)
        if exact and 1.0 - min(val * val, 1.0) <= optimizer.stop_infidelity and val > 0:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta + lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    if not exact:
        return theta
    val = obj.value(theta)
    return theta if val > best_val else best


def _gd_line_search(obj: _Objective, theta: NDArray, iters: int, tol: float) -> NDArray:
    """Gradient ascent with Armijo backtracking; the step grows after every success."""
    val, g = obj.value_and_grad(theta)
    step = 1.0
    for _ in range(iters):
        gg = float(g @ g)
        if gg < 1e-30 or 1.0 - val * val <= tol:
            break
        while step > 1e-12:
            trial = theta + step * g
            tv = obj.value(trial)
            if tv >= val + 1e-4 * step * gg:
                break
            step *= 0.5
        else:
            break
        theta = trial
        val, g = obj.value_and_grad(theta)
        step *= 2.0
    return theta


def _refine(obj: _Objective, theta: NDArray, optimizer: OptimizerConfig) -> NDArray:
    if obj.mode.kind != "exact" or optimizer.refine == "none" or optimizer.refine_iters == 0:
        return theta
    if 1.0 - obj.fidelity(theta) <= optimizer.stop_infidelity:
        return theta
    if optimizer.refine == "gd":
        return _gd_line_search(obj, theta, optimizer.refine_iters, optimizer.stop_infidelity)

    def fun(th):
        val, g = obj.value_and_grad(th)
        return -val, -g

    def stop(intermediate_result):
        if 1.0 - min(intermediate_result.fun**2, 1.0) <= optimizer.stop_infidelity:
            raise StopIteration

    res = minimize(fun, theta, jac=True, method="L-BFGS-B", callback=stop,
                   options={"maxiter": optimizer.refine_iters, "gtol": 1e-12, "ftol": 1e-16})
    return res.x if -res.fun >= obj.exact(theta) else theta


def _orient(obj: _Objective, theta: NDArray) -> NDArray:
    """Flip the global sign (one angle + 2 pi) when the overlap is negative."""
    if obj.exact(theta) < 0:
        theta = theta.copy()
        theta[0] += 2 * np.pi
    return theta


def train_to_target(
    ansatz: BrickwallAnsatz,
    components: Sequence[tuple[float, NDArray]],
    optimizer: OptimizerConfig,
    mode: ModeConfig,
    rng: np.random.Generator,
    init: NDArray | None = None,
    fresh: bool = False,
) -> TrainResult:
    """Maximize the overlap with ``T = sum w_k b_k``.

    ``fresh`` runs ``init_restarts`` randomly initialized Adam runs (plus
    ``init`` when given) with the initial-state learning rate and keeps the best.
    """
    obj = _Objective(ansatz, components, optimizer, mode, rng)
    history: list[float] = []
    if init is None:
        init = np.zeros(ansatz.n_params)
    init = _orient(obj, np.asarray(init, dtype=float))
    warm = obj.fidelity(init)
    if not fresh:
        theta = _adam(obj, init.copy(), optimizer.lr, optimizer.epochs, optimizer, history)
        theta = _refine(obj, theta, optimizer)
    else:
        candidates = [init] + [rng.normal(0.0, optimizer.init_noise, ansatz.n_params)
                               for _ in range(optimizer.init_restarts)]
        best, best_f = init, warm
        for start in candidates:
            th = _adam(obj, _orient(obj, start), optimizer.init_lr, optimizer.init_epochs, optimizer, history)
            th = _refine(obj, th, optimizer)
            fid = obj.fidelity(th)
            if fid > best_f:
                best, best_f = th, fid
            if 1.0 - best_f <= optimizer.stop_infidelity:
                break
        theta = best
    theta = _orient(obj, theta)
    return TrainResult(theta, obj.fidelity(theta), warm, obj.evaluations, history)


# ---------------------------------------------------------------------------
# measurement


@dataclass
class TermReport:
    op: str | None
    weight: float
    alpha_succ: float
    phi: float
    sigma_z: float
    overlap: float


@dataclass
class CostReport:
    """Measured cost of one trained (sub)step: ``C(theta0') = theta0'^2 - 2 theta0' value``.

    ``value`` is the weighted overlap sum, so the optimal ``theta0'`` equals it.
    """

    value: float
    terms: list[TermReport]
    alpha_succ: float
    phi_used: float
    sigma_z: float
    fidelity: float
    train_fidelity: float
    warm_fidelity: float

    def to_dict(self) -> dict:
        return {
            "value": self.value, "alpha_succ": self.alpha_succ, "phi": self.phi_used,
            "sigma_z": self.sigma_z, "fidelity": self.fidelity, "train_fidelity": self.train_fidelity,
            "warm_fidelity": self.warm_fidelity,
            "terms": [vars(t) for t in self.terms],
        }


def _readout(run_test: Callable[[float], TestOutcome], alpha_exact: float, mode: ModeConfig,
             rng: np.random.Generator) -> tuple[float, float, float]:
    """``(sigma_z, alpha, phi)`` at the optimal angle; shots mode estimates alpha by counting survivors."""
    if mode.kind == "exact":
        alpha = min(max(alpha_exact, 1e-300), 1.0)
        phi = phi_opt(alpha)
        out = run_test(phi)
        return out.sigma_z, out.alpha_succ, phi
    kept = int(rng.binomial(mode.shots, min((1 + alpha_exact) / 2, 1.0)))
    alpha = min(max(alpha_from_kept(kept, mode.shots), 1.0 / mode.shots), 1.0)
    phi = phi_opt(alpha)
    sigma, kept = sampled_sigma_z(run_test(phi), mode.shots, rng)
    alpha = min(max(alpha_from_kept(kept, mode.shots), 1.0 / mode.shots), 1.0)
    return sigma, alpha, phi


@dataclass
class _Component:
    weight: float
    op: str | None
    ket: BrickwallAnsatz | BasisState
    branch: NDArray[np.complex128]


def _component(problem: PDEProblem, coef: float, op: str | None, ket: BrickwallAnsatz | BasisState,
               theta0: float) -> _Component | None:
    if coef == 0.0 or theta0 == 0.0:
        return None
    chain = [problem.operators[op]] if op is not None else []
    c = problem.operators[op].c_mpo if op is not None else 1.0
    return _Component(coef * theta0 * c, op, ket, operator_branch(ket, chain))


def _measure_components(problem: PDEProblem, bra: BrickwallAnsatz, comps: Sequence[_Component],
                        mode: ModeConfig, rng: np.random.Generator) -> tuple[float, list[TermReport]]:
    total, terms = 0.0, []
    bra_state = bra.state()
    for comp in comps:
        chain = [problem.operators[comp.op]] if comp.op is not None else []
        alpha_exact = float(np.vdot(comp.branch, comp.branch).real)
        if mode.metrics == "circuit":
            def run(phi, comp=comp, chain=chain):
                return hadamard_test(bra, chain, comp.ket, phi)
        else:
            def run(phi, comp=comp):
                return outcome_from_branch(bra_state, comp.branch, phi)
        sigma, alpha, phi = _readout(run, alpha_exact, mode, rng)
        r = overlap_from_expectation(sigma, alpha, phi)
        total += comp.weight * r
        terms.append(TermReport(comp.op, comp.weight, alpha, phi, sigma, r))
    return total, terms


# ---------------------------------------------------------------------------
# steps


def _ansatz(state: SolverState, theta: NDArray | None = None) -> BrickwallAnsatz:
    th = np.zeros(0) if theta is None else theta
    if theta is None:
        from .simulator import brickwall_param_count

        th = np.zeros(brickwall_param_count(state.n, state.layers))
    return BrickwallAnsatz(state.n, state.layers, state.entangler, th)


def _check_threshold(fidelity: float, optimizer: OptimizerConfig, mode: ModeConfig) -> bool:
    return mode.kind == "shots" or fidelity >= optimizer.fidelity_threshold


def _linear_substep(
    problem: PDEProblem,
    state: SolverState,
    comps: list[_Component],
    inits: Sequence[tuple[NDArray, float]],
    optimizer: OptimizerConfig,
    mode: ModeConfig,
    rng: np.random.Generator,
) -> tuple[NDArray, float, CostReport]:
    """Train one field against ``sum w_k P U_k |ket_k>``; the new norm is the measured weighted overlap."""
    proto = _ansatz(state)
    if not comps or np.linalg.norm(sum(c.weight * c.branch for c in comps)) <= ZERO_NORM:
        theta = next((th for th, t0 in inits if t0 > 0), inits[0][0])
        return theta, 0.0, CostReport(0.0, [], 1.0, math.pi / 2, 1.0, 1.0, 1.0, 1.0)
    pairs = [(c.weight, c.branch) for c in comps]
    live = [(th, t0) for th, t0 in inits if t0 > 0]
    if live:
        # warm start from the candidate closest to the target
        obj = _Objective(proto, pairs, optimizer, ModeConfig(), rng)
        init = max((th for th, _ in live), key=lambda th: abs(obj.exact(th)))
        res = train_to_target(proto, pairs, optimizer, mode, rng, init=init)
    else:
        res = train_to_target(proto, pairs, optimizer, mode, rng, init=inits[0][0], fresh=True)
    bra = proto.with_theta(res.theta)
    value, terms = _measure_components(problem, bra, comps, mode, rng)
    norm = float(np.linalg.norm(sum(c.weight * c.branch for c in comps)))
    fid = min(max(value / norm, 0.0) ** 2, 1.0)
    op_terms = [t for t in terms if t.op is not None] or terms
    worst = min(op_terms, key=lambda t: t.alpha_succ)
    report = CostReport(value, terms, worst.alpha_succ, worst.phi, worst.sigma_z, fid, res.fidelity,
                        res.warm_fidelity)
    return res.theta, value, report


def _fail(message: str, state: SolverState, fidelity: float, substep: int | None = None) -> StepFailure:
    return StepFailure(message, state, substep, fidelity)


def _dense_norms(problem: PDEProblem, state: SolverState) -> dict[str, float]:
    nxt = dense_step(problem, state.fields(), state.t)
    return {f: float(np.linalg.norm(v)) for f, v in nxt.items()}


def euler_step(problem: PDEProblem, state: SolverState, optimizer: OptimizerConfig,
               mode: ModeConfig | None = None, rng: np.random.Generator | None = None) -> SolverState:
    """One explicit Euler step, one fused circuit per field.

    Linear problems use a single operator per field; Burgers-type problems
    run the weighted linear plus pointwise-product circuit.
    """
    mode = mode or ModeConfig()
    rng = rng or np.random.default_rng(0)
    if problem.scheme != "euler":
        raise InvalidInput("euler_step needs an euler-scheme problem")
    dense = _dense_norms(problem, state)
    new_theta, new_theta0, metrics = dict(state.theta), dict(state.theta0), {}
    for f in problem.fields:
        th0 = state.theta0[f]
        ket = state.ansatz(f)
        terms = problem.step_terms[f]
        if th0 == 0.0:
            new_theta0[f] = 0.0
            metrics[f] = {"theta0": 0.0, "fidelity": 1.0}
            continue
        if problem.nonlinear is not None:
            lin_name, nl_name = problem.nonlinear
            lin, nl = problem.operators[lin_name], problem.operators[nl_name]
            k_u = th0 * abs(nl.c_mpo) / abs(lin.c_mpo)
            phi_u = phi_u_weight(th0, nl.c_mpo, lin.c_mpo)
            branch = pointwise_branch(ket, lin, nl, phi_u)
            res = train_to_target(_ansatz(state), [(1.0, branch)], optimizer, mode, rng, init=state.theta[f])
            bra = ket.with_theta(res.theta)
            if mode.metrics == "circuit":
                def run(phi):
                    return nonlinear_test(bra, lin, nl, ket, phi, phi_u)
            else:
                bra_state = bra.state()

                def run(phi):
                    return outcome_from_branch(bra_state, branch, phi)
            sigma, alpha, phi = _readout(run, float(np.vdot(branch, branch).real), mode, rng)
            fnorm = norm_constant_f(alpha, phi)
            r_u = r_u_correction(k_u, phi_u)
            value = update_norm_nonlinear(th0, lin.c_mpo, fnorm, r_u, sigma)
            extra = {"phi_u": phi_u, "r_u": r_u, "k_u": k_u}
        else:
            if len(terms) != 1 or terms[0].weight != 1.0 or terms[0].field != f or terms[0].op is None:
                raise InvalidInput("linear euler_step expects one unit-weight operator term per field")
            op = problem.operators[terms[0].op]
            branch = operator_branch(ket, [op])
            res = train_to_target(_ansatz(state), [(1.0, branch)], optimizer, mode, rng, init=state.theta[f])
            bra = ket.with_theta(res.theta)
            if mode.metrics == "circuit":
                def run(phi):
                    return hadamard_test(bra, [op], ket, phi)
            else:
                bra_state = bra.state()

                def run(phi):
                    return outcome_from_branch(bra_state, branch, phi)
            sigma, alpha, phi = _readout(run, float(np.vdot(branch, branch).real), mode, rng)
            fnorm = norm_constant_f(alpha, phi)
            value = update_norm_linear(th0, op.c_mpo, fnorm, sigma)
            extra = {}
        fid = fidelity_from_expectation(sigma, alpha, phi)
        new_theta[f], new_theta0[f] = res.theta, value
        metrics[f] = {"theta0": value, "alpha_succ": alpha, "phi": phi, "sigma_z": sigma, "f": fnorm,
                      "fidelity": fid, "train_fidelity": res.fidelity, "warm_fidelity": res.warm_fidelity,
                      "dense_norm": dense[f], **extra}
        if not _check_threshold(fid, optimizer, mode):
            best = replace(state, theta=new_theta, theta0=new_theta0, t=state.t + problem.dt,
                           step=state.step + 1, metrics=metrics)
            raise _fail(f"step {state.step + 1}, field {f}: infidelity {1 - fid:.3e} above threshold", best, fid)
    return replace(state, theta=new_theta, theta0=new_theta0, t=state.t + problem.dt, step=state.step + 1,
                   metrics=metrics)


def rk4_step(problem: PDEProblem, state: SolverState, optimizer: OptimizerConfig,
             mode: ModeConfig | None = None, rng: np.random.Generator | None = None) -> SolverState:
    """Five sequential trainings per field: four stage states, then their weighted sum.

    Stage ``m`` fits ``c_st phi_j + c_rk dt g(t_m, stage m-1)`` where ``g``
    couples all fields through the compiled operators plus the point source.
    """
    mode = mode or ModeConfig()
    rng = rng or np.random.default_rng(0)
    if problem.scheme != "rk4":
        raise InvalidInput("rk4_step needs an rk4-scheme problem")
    dt = problem.dt
    dense = _dense_norms(problem, state)
    fields = problem.fields
    base = {f: (state.theta[f], state.theta0[f]) for f in fields}
    prev = dict(base)
    stages: list[dict[str, tuple[NDArray, float]]] = []
    metrics: dict = {f: {"substeps": []} for f in fields}

    def ket_of(entry):
        return _ansatz(state, entry[0])

    def run_substep(index: int, f: str, spec: list[tuple[float, str | None, object, float]],
                    inits: list[tuple[NDArray, float]]):
        comps = [c for c in (_component(problem, coef, op, ket, t0) for coef, op, ket, t0 in spec) if c is not None]
        theta, value, report = _linear_substep(problem, state, comps, inits, optimizer, mode, rng)
        metrics[f]["substeps"].append(report.to_dict())
        if value < 0:
            raise _fail(f"step {state.step + 1}, substep {index}, field {f}: negative norm {value:.3e}",
                        state, report.fidelity, index)
        if not _check_threshold(report.fidelity, optimizer, mode):
            raise _fail(f"step {state.step + 1}, substep {index}, field {f}: infidelity "
                        f"{1 - report.fidelity:.3e} above threshold", state, report.fidelity, index)
        return theta, value

    for m, (c_st, c_rk, tau) in enumerate(RK4_STAGES, start=1):
        t_m = state.t + tau * dt
        new = {}
        for f in fields:
            spec = [(c_st, None, ket_of(base[f]), base[f][1])]
            for term in problem.rhs.get(f, []):
                src = prev[term.field]
                spec.append((c_rk * dt * term.weight, term.op, ket_of(src), src[1]))
            if problem.source is not None and problem.source.field == f:
                amp = problem.source.amplitude * math.sin(problem.source.omega * t_m)
                spec.append((c_rk * dt * amp, None, BasisState(problem.n, problem.source.index), 1.0))
            new[f] = run_substep(m, f, spec, [prev[f], base[f]])
        prev = new
        stages.append(new)
    final_theta, final_theta0 = {}, {}
    for f in fields:
        spec = [(w, None, ket_of(s[f]), s[f][1]) for w, s in zip(RK4_FINAL, stages)]
        final_theta[f], final_theta0[f] = run_substep(5, f, spec, [stages[3][f], stages[2][f], base[f]])
    for f in fields:
        subs = metrics[f]["substeps"]
        worst = min(subs, key=lambda s: s["fidelity"])
        metrics[f].update({"theta0": final_theta0[f], "fidelity": worst["fidelity"],
                           "alpha_succ": min(s["alpha_succ"] for s in subs),
                           "phi": worst["phi"], "sigma_z": worst["sigma_z"],
                           "warm_fidelity": min(s["warm_fidelity"] for s in subs), "dense_norm": dense[f]})
    return replace(state, theta=final_theta, theta0=final_theta0, t=state.t + dt, step=state.step + 1,
                   metrics=metrics)


def step(problem: PDEProblem, state: SolverState, optimizer: OptimizerConfig,
         mode: ModeConfig | None = None, rng: np.random.Generator | None = None) -> SolverState:
    fn = euler_step if problem.scheme == "euler" else rk4_step
    return fn(problem, state, optimizer, mode, rng)


def initial_state(problem: PDEProblem, layers: int, optimizer: OptimizerConfig, entangler: str = "cnot",
                  rng: np.random.Generator | None = None) -> SolverState:
    """Fit every initial field by maximizing its normalized fidelity; zero fields stay exactly zero."""
    rng = rng or np.random.default_rng(0)
    from .simulator import brickwall_param_count

    count = brickwall_param_count(problem.n, layers)
    theta, theta0, metrics = {}, {}, {}
    proto = BrickwallAnsatz(problem.n, layers, entangler)
    for f, values in problem.initial.items():
        v = np.asarray(values, dtype=float)
        norm = float(np.linalg.norm(v))
        if norm <= ZERO_NORM:
            theta[f], theta0[f] = np.zeros(count), 0.0
            metrics[f] = {"theta0": 0.0, "fidelity": 1.0}
            continue
        res = train_to_target(proto, [(1.0, v.astype(complex))], optimizer, ModeConfig(), rng, fresh=True,
                              init=None)
        overlap = float(v @ proto.with_theta(res.theta).state())
        theta[f], theta0[f] = res.theta, overlap
        metrics[f] = {"theta0": overlap, "fidelity": res.fidelity, "rel_error": 1.0 - res.fidelity}
    return SolverState(theta, theta0, problem.n, layers, entangler, 0.0, 0, metrics)
