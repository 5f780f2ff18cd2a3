"""Studies behind the sweep-alpha, landscape and scaling subcommands.

Each study returns plain rows (lists of dicts) plus a summary dict; the CLI
turns them into CSV/JSON.  Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .compiler import CompiledOperator, avg_success_probability
from .config import LandscapeConfig, ModeConfig, OptimizerConfig, ScalingConfig, SweepConfig
from .linalg import InvalidInput
from .mpo import (
    MPO,
    Boundary,
    backward_first,
    central_first,
    central_second,
    forward_first,
    identity_mpo,
    mpo_to_dense,
    sponge_mpo,
    stencil_mpo,
)
from .mps import cost_models, min_bond_for_accuracy, mps_from_dense, truncation_error_at
from .simulator import (
    BrickwallAnsatz,
    brickwall_param_count,
    operator_branch,
    outcome_from_branch,
    sampled_sigma_z,
)
from . import solver

# ---------------------------------------------------------------------------
# success-probability sweep

SWEEP_OPERATORS = (
    "identity",
    "first_derivative",
    "backward_derivative",
    "second_derivative",
    "forward_dirichlet",
    "backward_dirichlet",
    "sponge",
)
DERIVATIVES = ("first_derivative", "backward_derivative", "second_derivative", "forward_dirichlet",
               "backward_dirichlet")


def sweep_operator(name: str, n: int) -> MPO:
    """Operator of the sweep at ``n`` sites (periodic ones on ``[0, 2 pi)``, Dirichlet ones on ``[-4, 4)``)."""
    dx_per = 2 * math.pi / 2**n
    dx_dir = 8.0 / 2**n
    builders: dict[str, Callable[[], MPO]] = {
        "identity": lambda: identity_mpo(n),
        "first_derivative": lambda: stencil_mpo(central_first(dx_per, Boundary.PERIODIC), n),
        "backward_derivative": lambda: stencil_mpo(backward_first(dx_per, Boundary.PERIODIC), n),
        "second_derivative": lambda: stencil_mpo(central_second(dx_per, Boundary.PERIODIC), n),
        "forward_dirichlet": lambda: stencil_mpo(forward_first(dx_dir), n),
        "backward_dirichlet": lambda: stencil_mpo(backward_first(dx_dir), n),
        "sponge": lambda: sponge_mpo(0.13, min(4, n - 1), n),
    }
    if name not in builders:
        raise InvalidInput(f"unknown sweep operator {name!r}; choose from {list(builders)}")
    return builders[name]()


def pointwise_alpha(n: int, sigma: float) -> float:
    """Success probability of ``u * (A u)`` for a unit Gaussian ``u`` and ``A = D_b / ||D_b||_2``.

    ``D_b`` is circulant, so its spectral norm is the largest modulus of the
    DFT of its first column.
    """
    size = 2**n
    dx = 2 * math.pi / size
    x = np.arange(size) * dx
    u = solver.gaussian(x, math.pi, sigma)
    u = u / np.linalg.norm(u)
    column = np.zeros(size)
    column[0], column[1 % size] = 1.0 / dx, -1.0 / dx
    norm = float(np.abs(np.fft.fft(column)).max())
    du = (u - np.roll(u, 1)) / dx
    return float(np.sum((u * du / norm) ** 2))


def _gaussian_on_grid(n: int, sigma: float) -> NDArray[np.float64]:
    dx = 2 * math.pi / 2**n
    return solver.gaussian(np.arange(2**n) * dx, math.pi, sigma)


def resolution_for_grid_error(sigma: float, grid_error: float, n_max: int = 16) -> int | None:
    """Smallest ``n`` whose periodic linear interpolation matches the ``n + 1`` grid to RMSE below ``grid_error``."""
    fine = _gaussian_on_grid(2, sigma)
    for n in range(2, n_max):
        coarse, fine = fine, _gaussian_on_grid(n + 1, sigma)
        interp = np.empty_like(fine)
        interp[::2] = coarse
        interp[1::2] = 0.5 * (coarse + np.roll(coarse, -1))
        rmse = float(np.sqrt(np.mean((interp - fine) ** 2)))
        if rmse < grid_error:
            return n
    return None


def run_success_prob_sweep(
    cfg: SweepConfig,
    compile_fn: Callable[[MPO], CompiledOperator] | None = None,
) -> tuple[list[dict], dict]:
    """Average success probabilities, the pointwise-product curves and the constant-grid-error protocol.

    Rows carry a ``kind`` column: ``operator`` (dense optimal-scale value, plus the
    compiled value for ``n <= compile_n_max`` when ``compile_fn`` is given),
    ``pointwise`` and ``grid``.
    """
    if cfg.n_min < 2 or cfg.n_max < cfg.n_min:
        raise InvalidInput("sweep needs 2 <= n_min <= n_max")
    rows: list[dict] = []
    for name in cfg.operators:
        for n in range(cfg.n_min, cfg.n_max + 1):
            target = sweep_operator(name, n)
            dense = mpo_to_dense(target)
            row = {"kind": "operator", "name": name, "n": n, "sigma": "", "alpha": avg_success_probability(dense),
                   "alpha_compiled": "", "fit_error": ""}
            if compile_fn is not None and n <= cfg.compile_n_max:
                comp = compile_fn(target)
                row["alpha_compiled"] = avg_success_probability(comp)
                row["fit_error"] = comp.fit_error
            rows.append(row)
    for sigma in cfg.sigmas:
        for n in range(cfg.n_min, max(cfg.n_max, cfg.pointwise_n_max) + 1):
            rows.append({"kind": "pointwise", "name": "burgers_pointwise", "n": n, "sigma": sigma,
                         "alpha": pointwise_alpha(n, sigma), "alpha_compiled": "", "fit_error": ""})
    for sigma in cfg.grid_sigmas:
        n = resolution_for_grid_error(sigma, cfg.grid_error, cfg.grid_n_max)
        if n is None:
            rows.append({"kind": "grid", "name": "burgers_pointwise", "n": "", "sigma": sigma,
                         "alpha": float("nan"), "alpha_compiled": "", "fit_error": ""})
            continue
        rows.append({"kind": "grid", "name": "burgers_pointwise", "n": n, "sigma": sigma,
                     "alpha": pointwise_alpha(n, sigma), "alpha_compiled": "", "fit_error": ""})
    return rows, sweep_summary(rows)


def _curve(rows: list[dict], kind: str, name: str, sigma=None) -> list[float]:
    sel = [r for r in rows if r["kind"] == kind and r["name"] == name and (sigma is None or r["sigma"] == sigma)]
    return [r["alpha"] for r in sorted(sel, key=lambda r: r["n"])]


def sweep_summary(rows: list[dict]) -> dict:
    """Shape checks: operator curves non-increasing and converging, pointwise plateau then decay, grid curve flat."""
    out: dict = {"operators": {}, "pointwise": {}, "grid": {}}
    for name in sorted({r["name"] for r in rows if r["kind"] == "operator"}):
        a = np.array(_curve(rows, "operator", name))
        steps = np.diff(a)
        out["operators"][name] = {
            "alpha": a.tolist(),
            "derivative": name in DERIVATIVES,
            "non_increasing": bool(np.all(steps <= 1e-12 * np.maximum(1.0, a[:-1]))),
            # last change small against the first one (or everything already flat)
            "converging": bool(len(steps) < 2 or abs(steps[-1]) <= max(0.5 * abs(steps[0]), 1e-12)),
        }
    for sigma in sorted({r["sigma"] for r in rows if r["kind"] == "pointwise"}):
        a = np.array(_curve(rows, "pointwise", "burgers_pointwise", sigma))
        plateau = int(np.argmax(a < 0.9 * a.max())) if np.any(a < 0.9 * a.max()) else len(a)
        out["pointwise"][str(sigma)] = {
            "alpha": a.tolist(),
            "plateau_points": plateau,
            # flat while unresolved, then monotone decay to a clear loss
            "plateau_then_decay": bool(2 <= plateau < len(a) and np.all(np.diff(a[plateau - 1:]) <= 0)
                                       and a[-1] < 0.5 * a.max()),
        }
    grid = [r for r in rows if r["kind"] == "grid" and r["n"] != ""]
    if grid:
        a = np.array([r["alpha"] for r in grid])
        out["grid"] = {"n": [r["n"] for r in grid], "alpha": a.tolist(),
                       "no_decay": bool(a[-1] >= 0.5 * a[0])}
    return out


# ---------------------------------------------------------------------------
# loss landscape


def sine_fit(x: NDArray, y: NDArray, frequency: float) -> tuple[NDArray[np.float64], float]:
    """Least-squares ``a sin(w x) + b cos(w x) + c``; returns coefficients and the RMS residual."""
    design = np.column_stack([np.sin(frequency * x), np.cos(frequency * x), np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return coef, float(np.sqrt(np.mean(resid**2)))


@dataclass
class LandscapeSlice:
    """Exact and sampled cost ``1 - <sigma_z>`` along one angle."""

    n: int
    values: NDArray[np.float64]
    exact: NDArray[np.float64]
    sampled: dict[int, NDArray[np.float64]]
    fit_residual: float
    amplitude: float
    alpha: float
    phi: float


def landscape_slice(n: int, cfg: LandscapeConfig, rng: np.random.Generator,
                    compile_fn: Callable[[MPO], CompiledOperator] | None = None) -> LandscapeSlice:
    """First advection-diffusion step: bra starts at the trained initial angles and one angle is scanned.

    The operator is compiled through ``compile_fn`` when given, otherwise it
    is embedded ideally as ``M / ||M||_2``.
    """
    problem = solver.advection_diffusion(n, dt=cfg.dt)
    target = problem.targets["step"]
    opt = OptimizerConfig(init_restarts=cfg.restarts, init_epochs=cfg.init_epochs)
    state = solver.initial_state(problem, cfg.layers, opt, "cnot", rng)
    ket = state.ansatz("u")
    if compile_fn is not None:
        branch = operator_branch(ket, [compile_fn(target)])
    else:
        m = mpo_to_dense(target)
        branch = (m / np.linalg.norm(m, 2)) @ ket.state()
    alpha = float(np.vdot(branch, branch).real)
    phi = solver.phi_opt(alpha)
    count = brickwall_param_count(n, cfg.layers)
    if not 0 <= cfg.param_index < count:
        raise InvalidInput(f"param_index must lie in 0..{count - 1}")
    base = ket.theta.copy()
    values = base[cfg.param_index] + np.linspace(-2 * np.pi, 2 * np.pi, cfg.points)
    outcomes = []
    for v in values:
        th = base.copy()
        th[cfg.param_index] = v
        outcomes.append(outcome_from_branch(ket.with_theta(th).state(), branch, phi))
    exact = np.array([1.0 - o.sigma_z for o in outcomes])
    sampled: dict[int, NDArray] = {}
    for shots in cfg.shots:
        if shots == 0:
            sampled[0] = exact.copy()
            continue
        runs = np.empty((cfg.repeats, len(values)))
        for r in range(cfg.repeats):
            for k, o in enumerate(outcomes):
                runs[r, k] = 1.0 - sampled_sigma_z(o, shots, rng)[0]
        sampled[shots] = runs
    # angles enter the amplitudes as half angles
    _, residual = sine_fit(values, exact, 0.5)
    return LandscapeSlice(n, values, exact, sampled, residual, float(exact.max() - exact.min()), alpha, phi)


def run_loss_landscape(cfg: LandscapeConfig, seed: int = 0,
                       compile_fn: Callable[[MPO], CompiledOperator] | None = None) -> tuple[list[dict], dict]:
    """Rows ``(n, theta, exact, sampled_<shots>...)`` and per-n fit residual, amplitude and shot RMSE."""
    rng = np.random.default_rng(seed)
    rows: list[dict] = []
    summary: dict = {"n": {}, "rmse_ratio": {}}
    for n in cfg.n_values:
        sl = landscape_slice(n, cfg, rng, compile_fn)
        rmse = {}
        for shots, runs in sl.sampled.items():
            rmse[shots] = float(np.sqrt(np.mean((np.atleast_2d(runs) - sl.exact) ** 2)))
        summary["n"][str(n)] = {"fit_residual": sl.fit_residual, "amplitude": sl.amplitude, "alpha": sl.alpha,
                                "phi": sl.phi, "rmse": {str(k): v for k, v in rmse.items()}}
        for k, v in enumerate(sl.values):
            row = {"n": n, "theta": float(v), "exact": float(sl.exact[k]), "fit_residual": sl.fit_residual}
            for shots, runs in sl.sampled.items():
                row[f"sampled_{shots}"] = float(np.atleast_2d(runs)[0, k])
            rows.append(row)
    for shots in cfg.shots:
        if shots == 0:
            continue
        vals = [summary["n"][str(n)]["rmse"][str(shots)] for n in cfg.n_values]
        summary["rmse_ratio"][str(shots)] = max(vals) / min(vals) if min(vals) > 0 else float("inf")
    return rows, summary


# ---------------------------------------------------------------------------
# scaling study


def synthetic_field(kind: str, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """3D field on ``2^(n/3)`` points per axis, serialized with interleaved bits.

    ``constant`` and ``random`` are the extreme cases; ``multiscale`` sums three
    Gaussians of decreasing width at random centres.
    """
    if n % 3:
        raise InvalidInput("scaling fields need n divisible by 3")
    from .mps import interleave_bits

    side = 2 ** (n // 3)
    if kind == "constant":
        return np.ones(2**n)
    if kind == "random":
        return rng.normal(size=2**n)
    if kind != "multiscale":
        raise InvalidInput(f"unknown field kind {kind!r}")
    grid = (np.arange(side) + 0.5) / side
    X, Y, Z = np.meshgrid(grid, grid, grid, indexing="ij")
    field = np.zeros_like(X)
    for width in (0.3, 0.15, 0.075):
        c = rng.uniform(0.25, 0.75, size=3)
        field += np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * width**2))
    return interleave_bits(field)


def _product_angles(v: NDArray) -> NDArray[np.float64] | None:
    """Single-qubit RY angles preparing ``v / ||v||`` when it is a real product state."""
    m = mps_from_dense(v, chi_max=1)
    if truncation_error_at(v, 1) > 1e-12:
        return None
    return np.array([2 * math.atan2(float(c[0, 1, 0].real), float(c[0, 0, 0].real)) for c in m.cores])


def min_layers_for_accuracy(v: NDArray, target_error: float, max_layers: int, rng: np.random.Generator,
                            restarts: int = 3, optimizer: OptimizerConfig | None = None) -> tuple[int | None, float]:
    """Smallest brickwall depth (CZ blocks) reaching ``1 - F <= target_error``.

    Depth grows by one; each depth starts from the previous angles with the new
    layer at zero plus ``restarts`` random starts.  Returns ``(None, best)`` if
    ``max_layers`` is not enough.
    """
    vec = np.asarray(v, dtype=float)
    n = int(round(math.log2(vec.size)))
    opt = optimizer or OptimizerConfig(init_restarts=restarts, init_epochs=500, init_lr=0.05,
                                       refine_iters=1000, stop_infidelity=target_error / 10)
    target = [(1.0, vec.astype(complex))]
    prev = np.zeros(0)
    best = 1.0
    for layers in range(1, max_layers + 1):
        proto = BrickwallAnsatz(n, layers, "cz")
        init = np.zeros(proto.n_params)
        init[: prev.size] = prev
        res = solver.train_to_target(proto, target, opt, ModeConfig(), rng, init=init, fresh=True)
        prev, best = res.theta, 1.0 - res.fidelity
        if best <= target_error:
            return layers, best
    return None, best


def run_scaling_study(cfg: ScalingConfig, seed: int = 0) -> tuple[list[dict], dict]:
    """Rows ``(n, chi_min, mps_params, L_min, circuit_params, ratio, T_MPS, T_QC best/worst)``.

    Product-state fields need no entangling layer: ``L_min = 0`` with one RY
    angle per qubit.  Rows whose depth search fails are flagged ``fit_failed``.
    """
    rng = np.random.default_rng(seed)
    rows: list[dict] = []
    for n in cfg.n_values:
        v = synthetic_field(cfg.field, n, rng)
        chi = min_bond_for_accuracy(v, cfg.target_error)
        mps_err = truncation_error_at(v, chi)
        angles = _product_angles(v)
        if angles is not None:
            layers, circuit_err, params = 0, 0.0, n
        else:
            layers, circuit_err = min_layers_for_accuracy(v, cfg.target_error, cfg.max_layers, rng, cfg.restarts)
            params = brickwall_param_count(n, layers) if layers else brickwall_param_count(n, cfg.max_layers)
        cost = cost_models(n, chi, params, cfg.eps)
        rows.append({
            "field": cfg.field, "n": n, "chi_min": chi, "mps_error": mps_err, "mps_params": int(cost["mps_params"]),
            "L_min": "" if layers is None else layers, "circuit_params": params, "circuit_error": circuit_err,
            "ratio": params / cost["mps_params"], "T_MPS": cost["t_mps"], "T_QC_best": cost["t_qc_best"],
            "T_QC_worst": cost["t_qc_worst"], "fit_failed": layers is None,
        })
    return rows, {"field": cfg.field, "failed_rows": sum(r["fit_failed"] for r in rows)}

