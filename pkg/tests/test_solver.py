from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpqc.compiler import compile_mpo
from tpqc.config import ModeConfig, OptimizerConfig
from tpqc.linalg import InvalidInput, NumericalFailure
from tpqc.mpo import Boundary, backward_first, central_second, identity_mpo, mpo_scale, mpo_to_dense, stencil_mpo
from tpqc.solver import (PDEProblem, PointSource, ProblemKind, SolverState, StepFailure, Term, advection_diffusion,
                         alpha_from_phi, burgers, classical_reference, compile_problem, dense_step,
                         expectation_from_fidelity, fidelity_from_expectation, initial_state, linear_euler,
                         norm_constant_f, overlap_from_expectation, phi_opt, phi_u_weight, r_u_correction,
                         relative_error, sigma_z_from_overlap, step, update_norm_linear, update_norm_nonlinear)

# sigma_z - cos(phi) cancels to O(alpha), so round trips lose about 1e-16 / alpha
alphas = st.floats(1e-4, 1.0)
phis = st.floats(0.05, math.pi / 2)
FAST = OptimizerConfig(lr=0.01, epochs=300, refine_iters=500, init_restarts=2, init_epochs=400)


@given(alphas)
def test_norm_constant_at_optimal_angle(alpha):
    assert norm_constant_f(alpha, phi_opt(alpha)) == pytest.approx(math.sqrt(alpha), abs=1e-12)


@given(alphas)
def test_sigma_z_is_one_at_optimal_angle(alpha):
    assert expectation_from_fidelity(1.0, alpha, phi_opt(alpha)) == pytest.approx(1.0, abs=1e-10)


@given(st.floats(0.0, 1.0), alphas, phis)
def test_fidelity_round_trip(fid, alpha, phi):
    sz = expectation_from_fidelity(fid, alpha, phi)
    assert fidelity_from_expectation(sz, alpha, phi) == pytest.approx(fid, abs=1e-10)


@given(st.floats(-1.0, 1.0), alphas, phis)
def test_overlap_inverse(r, alpha, phi):
    r = r * math.sqrt(alpha)
    assert overlap_from_expectation(sigma_z_from_overlap(r, alpha, phi), alpha, phi) == pytest.approx(r, abs=1e-12)


@given(alphas, phis)
def test_perfect_step_norm_is_branch_norm(alpha, phi):
    # f * sigma_z recovers sqrt(alpha) at any angle once the step is perfectly trained
    f = norm_constant_f(alpha, phi)
    assert f * expectation_from_fidelity(1.0, alpha, phi) == pytest.approx(math.sqrt(alpha), rel=1e-10)
    assert update_norm_linear(2.0, 3.0, f, expectation_from_fidelity(1.0, alpha, phi)) == pytest.approx(
        6.0 * math.sqrt(alpha), rel=1e-10)


@given(alphas)
def test_alpha_phi_inverse(alpha):
    assert alpha_from_phi(phi_opt(alpha)) == pytest.approx(alpha, rel=1e-10)


def test_closed_form_domains():
    with pytest.raises(InvalidInput):
        norm_constant_f(0.0, 1.0)
    with pytest.raises(InvalidInput):
        phi_opt(1.5)
    with pytest.raises(InvalidInput):
        fidelity_from_expectation(1.0, 0.5, 0.0)
    with pytest.raises(NumericalFailure):
        update_norm_linear(1.0, 1.0, 1.0, -0.1)
    with pytest.raises(InvalidInput):
        phi_u_weight(1.0, 1.0, 0.0)
    assert r_u_correction(0.0, 0.0) == 1.0


@given(st.floats(0.01, 5.0), st.floats(0.01, 2.0), st.floats(0.1, 2.0), st.integers(0, 1000))
def test_nonlinear_norm_for_perfect_step(theta0, c_nl, c_lin, seed):
    r = np.random.default_rng(seed)
    u = r.standard_normal(8)
    u /= np.linalg.norm(u)
    q_lin, q_nl = r.standard_normal((8, 8)) * 0.2, r.standard_normal((8, 8)) * 0.2
    phi_u = phi_u_weight(theta0, c_nl, c_lin)
    k_u = theta0 * c_nl / c_lin
    assert math.tan(phi_u / 2) == pytest.approx(k_u, rel=1e-12)
    branch = (math.cos(phi_u / 2) * q_lin @ u + math.sin(phi_u / 2) * u * (q_nl @ u)) / math.sqrt(2)
    alpha = float(branch @ branch)
    target = theta0 * (c_lin * q_lin @ u + theta0 * c_nl * u * (q_nl @ u))
    phi = phi_opt(min(alpha, 1.0))
    value = update_norm_nonlinear(theta0, c_lin, norm_constant_f(alpha, phi), r_u_correction(k_u, phi_u),
                                  expectation_from_fidelity(1.0, alpha, phi))
    assert value == pytest.approx(np.linalg.norm(target), rel=1e-10)


@given(st.integers(0, 1000), st.floats(0.1, 10), st.floats(0.1, 10))
def test_relative_error_properties(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(32), r.standard_normal(32)
    assert relative_error(a * x, b * y) == pytest.approx(relative_error(x, y), abs=1e-12)
    assert relative_error(x, -x) == pytest.approx(0.0, abs=1e-14)


def test_problem_operators_match_definitions():
    n = 5
    p = burgers(n)
    dx, dt, nu = p.dx, p.dt, p.constants["nu"]
    d2 = mpo_to_dense(stencil_mpo(central_second(dx, Boundary.PERIODIC), n)).real
    db = mpo_to_dense(stencil_mpo(backward_first(dx, Boundary.PERIODIC), n)).real
    np.testing.assert_allclose(p.dense("lin"), np.eye(2**n) + dt * nu * d2, atol=1e-12)
    np.testing.assert_allclose(p.dense("nonlin"), -dt * db, atol=1e-12)
    u = p.initial["u"]
    expected = u + dt * (-u * (db @ u) + nu * d2 @ u)
    np.testing.assert_allclose(dense_step(p, p.initial, 0.0)["u"], expected, atol=1e-12)
    assert dt == pytest.approx(0.5 * dx)


def textbook_rk4(problem, fields, t, steps):
    """Classical k1..k4 RK4 on the coupled linear system plus source."""
    ops = {name: problem.dense(name) for name in problem.targets}
    ops[None] = np.eye(problem.size)

    def rhs(v, time):
        out = {}
        for f in problem.fields:
            g = sum(term.weight * ops[term.op] @ v[term.field] for term in problem.rhs[f])
            if problem.source is not None and problem.source.field == f:
                g = g + problem.source.vector(time, problem.size)
            out[f] = g
        return out

    dt = problem.dt
    for j in range(steps):
        t = j * dt
        k1 = rhs(fields, t)
        k2 = rhs({f: fields[f] + dt / 2 * k1[f] for f in fields}, t + dt / 2)
        k3 = rhs({f: fields[f] + dt / 2 * k2[f] for f in fields}, t + dt / 2)
        k4 = rhs({f: fields[f] + dt * k3[f] for f in fields}, t + dt)
        fields = {f: fields[f] + dt / 6 * (k1[f] + 2 * k2[f] + 2 * k3[f] + k4[f]) for f in fields}
    return fields


def test_rk4_reference_matches_textbook_scheme():
    p = linear_euler(6)
    ref = classical_reference(p, 10)
    oracle = textbook_rk4(p, p.initial, 0.0, 10)
    for f in p.fields:
        np.testing.assert_allclose(ref[-1][f], oracle[f], rtol=1e-10, atol=1e-10 * np.abs(oracle[f]).max())


def scalar_problem(lam: float, dt: float) -> PDEProblem:
    n = 2
    x = np.arange(4.0)
    return PDEProblem(ProblemKind.CUSTOM, n, 1.0, dt, x, Boundary.PERIODIC, {}, {"A": mpo_scale(identity_mpo(n), lam)},
                      {"u": np.ones(4)}, "rk4", rhs={"u": [Term(1.0, "A", "u")]})


@given(st.floats(-2.0, 0.5), st.floats(0.0, 0.5))
def test_rk4_amplification_factor(lam, dt):
    z = lam * dt
    out = dense_step(scalar_problem(lam, dt), {"u": np.ones(4)}, 0.0)["u"]
    np.testing.assert_allclose(out, 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24, rtol=1e-12)


def test_rk4_local_error_order():
    errs = []
    for dt in (0.2, 0.1):
        out = dense_step(scalar_problem(-1.0, dt), {"u": np.ones(4)}, 0.0)["u"][0]
        errs.append(abs(out - math.exp(-dt)))
    assert errs[0] / errs[1] == pytest.approx(2**5, rel=0.1)


def test_rk4_with_time_dependent_source_has_fourth_order():
    # u' = sin(t): the exact increment from t0 is cos(t0) - cos(t0 + dt)
    errs = []
    t0 = 0.3
    for dt in (0.2, 0.1):
        p = scalar_problem(0.0, dt)
        p = PDEProblem(p.name, p.n, 1.0, dt, p.x, p.boundary, {}, p.targets, {"u": np.zeros(4)}, "rk4",
                       rhs={"u": []}, source=PointSource("u", 1.0, 1.0, 0))
        out = dense_step(p, {"u": np.zeros(4)}, t0)["u"][0]
        errs.append(abs(out - (math.cos(t0) - math.cos(t0 + dt))))
    assert errs[0] / errs[1] == pytest.approx(2**5, rel=0.15)


def test_reference_rejects_large_n():
    with pytest.raises(InvalidInput):
        classical_reference(burgers(15), 1)


# ---------------------------------------------------------------------------
# small end-to-end steps


@pytest.fixture(scope="module")
def burgers3():
    p = burgers(3)
    return compile_problem(p, 4)


def compiled_dense_step(problem, fields):
    """Dense update with the compiled matrices ``c Q`` in place of the exact operators."""
    ops = {name: op.target_matrix().real for name, op in problem.operators.items()}
    ops[None] = np.eye(problem.size)
    return dense_step(problem, fields, 0.0, ops)


@pytest.mark.parametrize("metrics", ["circuit", "branch"])
def test_burgers_step_matches_dense(burgers3, metrics):
    rng = np.random.default_rng(0)
    st0 = initial_state(burgers3, 4, FAST, rng=rng)
    assert st0.metrics["u"]["fidelity"] > 1 - 1e-8
    st1 = step(burgers3, st0, FAST, ModeConfig(metrics=metrics), rng)
    expected = compiled_dense_step(burgers3, st0.fields())["u"]
    assert relative_error(st1.field_values("u"), expected) < 1e-7
    assert st1.theta0["u"] == pytest.approx(np.linalg.norm(expected), rel=1e-4)
    assert st1.step == 1 and st1.t == pytest.approx(burgers3.dt)


def test_branch_and_circuit_metrics_agree(burgers3):
    st0 = initial_state(burgers3, 4, FAST, rng=np.random.default_rng(0))
    a = step(burgers3, st0, FAST, ModeConfig(metrics="circuit"), np.random.default_rng(1))
    b = step(burgers3, st0, FAST, ModeConfig(metrics="branch"), np.random.default_rng(1))
    for key in ("sigma_z", "alpha_succ", "theta0", "fidelity"):
        assert a.metrics["u"][key] == pytest.approx(b.metrics["u"][key], abs=1e-10)


def test_zero_time_step_is_identity():
    p = compile_problem(advection_diffusion(3, dt=0.0), 4)
    np.testing.assert_allclose(mpo_to_dense(p.targets["step"]), np.eye(8), atol=1e-14)
    rng = np.random.default_rng(0)
    st0 = initial_state(p, 4, FAST, rng=rng)
    st1 = step(p, st0, FAST, ModeConfig(), rng)
    assert relative_error(st1.field_values("u"), st0.field_values("u")) < 1e-9
    assert st1.theta0["u"] == pytest.approx(st0.theta0["u"], rel=1e-6)
    np.testing.assert_allclose(dense_step(p, p.initial, 0.0)["u"], p.initial["u"], atol=0)


def test_rk4_step_matches_dense():
    p = compile_problem(linear_euler(3, n_tilde=1), 8)
    opt = OptimizerConfig(lr=0.05, epochs=300, refine_iters=1000, init_restarts=1, init_epochs=10)
    rng = np.random.default_rng(0)
    st0 = initial_state(p, 6, opt, rng=rng)
    assert st0.theta0 == {"p": 0.0, "u": 0.0}
    state = st0
    fields = {f: np.zeros(8) for f in p.fields}
    ops = {name: op.target_matrix().real for name, op in p.operators.items()}
    ops[None] = np.eye(8)
    for j in range(2):
        state = step(p, state, opt, ModeConfig(metrics="branch"), rng)
        fields = dense_step(p, fields, j * p.dt, ops)
    for f in p.fields:
        assert relative_error(state.field_values(f), fields[f]) < 1e-6
        assert state.theta0[f] == pytest.approx(np.linalg.norm(fields[f]), rel=1e-3)
    assert len(state.metrics["p"]["substeps"]) == 5


def test_step_failure_carries_state(burgers3):
    strict = OptimizerConfig(lr=0.01, epochs=5, refine="none", fidelity_threshold=1.0, init_restarts=1,
                             init_epochs=50)
    rng = np.random.default_rng(0)
    st0 = initial_state(burgers3, 1, strict, rng=rng)
    with pytest.raises(StepFailure) as info:
        step(burgers3, st0, strict, ModeConfig(), rng)
    assert isinstance(info.value.state, SolverState)
    assert info.value.fidelity < 1.0


def test_shots_mode_runs(burgers3):
    rng = np.random.default_rng(0)
    st0 = initial_state(burgers3, 4, FAST, rng=rng)
    shots = 1_000_000
    st1 = step(burgers3, st0, FAST, ModeConfig(kind="shots", shots=shots), rng)
    expected = compiled_dense_step(burgers3, st0.fields())["u"]
    alpha = st1.metrics["u"]["alpha_succ"]
    # the survivor count fixes alpha to about 2 / sqrt(shots); theta0 scales as sqrt(alpha)
    rel_sd = 0.5 * (2 / math.sqrt(shots)) / alpha
    assert st1.theta0["u"] == pytest.approx(np.linalg.norm(expected), rel=5 * rel_sd)


def test_check_operators(burgers3):
    burgers3.check_operators(1e-8)
    fresh = burgers(3)
    with pytest.raises(InvalidInput):
        fresh.check_operators(1e-8)
    lin = compile_mpo(fresh.targets["lin"], 4, max_iters=1)
    fresh.operators.update(lin=lin, nonlin=burgers3.operators["nonlin"])
    if lin.fit_error > 1e-12:
        with pytest.raises(InvalidInput):
            fresh.check_operators(1e-12)
