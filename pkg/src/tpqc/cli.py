"""Command-line entry point: ``tpqc {compile,evolve,sweep-alpha,landscape,scaling}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 step
convergence failure.  Every failure also writes ``error.json`` into the
output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as cfgmod
from . import experiments, io, solver
from .compiler import CompiledOperator, avg_success_probability, compile_mpo, two_qubit_gate_bound
from .config import ConfigError, RunConfig
from .linalg import InvalidInput, NumericalFailure
from .mpo import MPO

logger = logging.getLogger("tpqc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_STEP = 0, 2, 3, 4
COMMANDS = ("compile", "evolve", "sweep-alpha", "landscape", "scaling")


# ---------------------------------------------------------------------------
# shared plumbing


def build_problem(cfg: RunConfig) -> solver.PDEProblem:
    """Problem instance for a resolved config."""
    p, t = cfg.problem, cfg.time
    if p.name == "advection_diffusion":
        prob = solver.advection_diffusion(p.n, p.nu, p.c_adv, t.dt, p.sigma)
    elif p.name == "burgers":
        prob = solver.burgers(p.n, p.nu, t.dt, p.sigma)
    else:
        prob = solver.linear_euler(p.n, t.dt, p.rho, p.c_sound, p.omega, p.amplitude, p.gamma_max, p.kappa,
                                   p.n_tilde, p.stencil)
    if t.scheme != prob.scheme:
        raise ConfigError(f"time.scheme {t.scheme!r} does not match problem {p.name!r} ({prob.scheme})")
    return prob


def cache_dir(cfg: RunConfig) -> Path:
    return Path(cfg.compile.cache_dir) if cfg.compile.cache_dir else io.output_root() / "cache"


def make_compiler(cfg: RunConfig, log: list[dict] | None = None) -> Callable[[str, MPO], CompiledOperator]:
    """Cached compile function; records name, timing and cache hits in ``log``."""
    cache = io.OperatorCache(cache_dir(cfg))
    c = cfg.compile

    def compile_fn(name: str, target: MPO) -> CompiledOperator:
        start = time.perf_counter()
        op = cache.get(target, c.Z, c.accept_tol)
        hit = op is not None
        if op is None:
            op = compile_mpo(target, c.Z, method=c.method, lr=c.lr, tol=c.tol, max_iters=c.max_iters,
                             seed=cfg.seed)
            cache.put(target, c.Z, op)
        if log is not None:
            log.append({"name": name, "seconds": time.perf_counter() - start, "cache_hit": hit,
                        "cache_file": str(cache.path(target, c.Z))})
        return op

    return compile_fn


def _out_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.output:
        return Path(cfg.output)
    return io.output_root() / f"{command}-{cfg.problem.name}-seed{cfg.seed}"


def _write_rows(path: Path, rows: list[dict]) -> None:
    header: list[str] = []
    for r in rows:
        header += [k for k in r if k not in header]
    io.write_csv(path, header, ([r.get(k, "") for k in header] for r in rows))


def _echo(out: Path, cfg: RunConfig, command: str) -> None:
    io.write_json(out / "config.json", {"command": command, **cfgmod.to_dict(cfg)})


# ---------------------------------------------------------------------------
# subcommands


def run_compile(cfg: RunConfig, out: Path) -> dict:
    """Compile (or load from cache) every operator of the configured problem; dump targets and gates."""
    problem = build_problem(cfg)
    log: list[dict] = []
    solver.compile_problem(problem, cfg.compile.Z, compile_fn=make_compiler(cfg, log))
    problem.check_operators(cfg.compile.accept_tol)
    rows = []
    for entry in log:
        name = entry["name"]
        op, target = problem.operators[name], problem.targets[name]
        io.dump_mpo(target, out / "mpo" / f"{name}.json")
        io.save_compiled(op, out / "compiled" / f"{name}.json", key=io.mpo_hash(target))
        rows.append({"name": name, "n": op.n, "Z": cfg.compile.Z, "n_aux": op.n_aux,
                     "target_bonds": " ".join(str(b) for b in target.bonds), "c_mpo": op.c_mpo,
                     "fit_error": op.fit_error, "alpha_bar": avg_success_probability(op),
                     "two_qubit_bound": two_qubit_gate_bound(op.n, cfg.compile.Z),
                     "cache_hit": entry["cache_hit"]})
        logger.info("compiled %s: E=%.3e c=%.6g (%.1fs%s)", name, op.fit_error, op.c_mpo, entry["seconds"],
                    ", cached" if entry["cache_hit"] else "")
    _write_rows(out / "compile.csv", rows)
    return {"operators": [r["name"] for r in rows]}


def _field_rows(problem: solver.PDEProblem, state: solver.SolverState, ref: dict | None) -> list[list]:
    values = state.fields()
    rows = []
    for i, x in enumerate(problem.x):
        row = [state.step, float(state.t), float(x)] + [float(values[f][i]) for f in problem.fields]
        if ref is not None:
            row += [float(ref[f][i]) for f in problem.fields]
        rows.append(row)
    return rows


def _rel_errors(state: solver.SolverState, ref: dict) -> dict[str, float | None]:
    out = {}
    for f, v in state.fields().items():
        if np.linalg.norm(v) == 0.0 or np.linalg.norm(ref[f]) == 0.0:
            out[f] = None
        else:
            out[f] = solver.relative_error(v, ref[f])
    return out


def _truncate_outputs(out: Path, step: int) -> None:
    """Drop rows past ``step`` so a resumed run appends cleanly."""
    fields = out / "fields.csv"
    if fields.exists():
        lines = fields.read_text().splitlines(keepends=True)
        keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
        fields.write_text("".join(keep))
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        recs = [ln for ln in metrics.read_text().splitlines(keepends=True)
                if ln.strip() and json.loads(ln)["step"] <= step]
        metrics.write_text("".join(recs))


def _append_rows(path: Path, rows: list[list]) -> None:
    with path.open("a") as fh:
        for row in rows:
            fh.write(",".join(io.fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _step_record(state: solver.SolverState, ref: dict | None, seconds: float | None) -> dict:
    rec = {"step": state.step, "t": state.t, "theta0": dict(state.theta0), "fields": state.metrics}
    if ref is not None:
        rec["rel_error"] = _rel_errors(state, ref)
    if seconds is not None:
        rec["seconds"] = seconds
    return rec


def run_evolution(cfg: RunConfig, out: Path, resume: bool = False) -> dict:
    """Time evolution with per-step checkpoints, ``fields.csv`` and ``metrics.jsonl``.

    Each step draws from its own generator seeded by ``(seed, step)``, so a
    resumed run continues exactly as an uninterrupted one.
    """
    problem = build_problem(cfg)
    solver.compile_problem(problem, cfg.compile.Z, compile_fn=make_compiler(cfg))
    problem.check_operators(cfg.compile.accept_tol)
    steps = cfg.time.steps
    refs = solver.classical_reference(problem, steps) if cfg.oracle else None
    state = None
    if resume:
        ckpt = io.latest_checkpoint(out)
        if ckpt is not None:
            state = io.load_checkpoint(ckpt)
            if state.n != problem.n or state.layers != cfg.ansatz.layers:
                raise ConfigError(f"checkpoint {ckpt} does not match the configured n/layers")
            _truncate_outputs(out, state.step)
            logger.info("resuming from %s (step %d)", ckpt, state.step)
    header = ["step", "t", "x"] + problem.fields + ([f"{f}_ref" for f in problem.fields] if refs else [])
    if state is None:
        state = solver.initial_state(problem, cfg.ansatz.layers, cfg.optimizer, cfg.ansatz.entangler,
                                     np.random.default_rng((cfg.seed, 0)))
        io.write_csv(out / "fields.csv", header, [])
        (out / "metrics.jsonl").write_text("")
        _append_rows(out / "fields.csv", _field_rows(problem, state, refs[0] if refs else None))
        io.append_jsonl(out / "metrics.jsonl", _step_record(state, refs[0] if refs else None, None))
        io.save_checkpoint(out, state)
    worst: dict[str, float] = {}
    while state.step < steps:
        start = time.perf_counter()
        rng = np.random.default_rng((cfg.seed, state.step + 1))
        state = solver.step(problem, state, cfg.optimizer, cfg.mode, rng)
        ref = refs[state.step] if refs else None
        rec = _step_record(state, ref, time.perf_counter() - start)
        io.append_jsonl(out / "metrics.jsonl", rec)
        _append_rows(out / "fields.csv", _field_rows(problem, state, ref))
        if state.step % cfg.checkpoint_every == 0 or state.step == steps:
            io.save_checkpoint(out, state)
        errs = rec.get("rel_error", {})
        for f, e in errs.items():
            if e is not None:
                worst[f] = max(worst.get(f, 0.0), e)
        logger.info("step %d t=%.6g %s", state.step, state.t,
                    " ".join(f"{f}:1-F={1 - state.metrics[f].get('fidelity', 1.0):.2e}"
                             + (f",err={errs[f]:.2e}" if errs.get(f) is not None else "") for f in problem.fields))
    if refs:
        for rec in io.read_jsonl(out / "metrics.jsonl"):
            for f, e in (rec.get("rel_error") or {}).items():
                if e is not None:
                    worst[f] = max(worst.get(f, 0.0), e)
    summary = {"steps": state.step, "t": state.t, "max_rel_error": worst}
    io.write_json(out / "summary.json", summary)
    return summary


def run_sweep(cfg: RunConfig, out: Path) -> dict:
    compile_fn = None
    if cfg.sweep.compile_n_max > 0:
        fn = make_compiler(cfg)

        def compile_fn(target):
            return fn("sweep", target)
    rows, summary = experiments.run_success_prob_sweep(cfg.sweep, compile_fn)
    _write_rows(out / "sweep_alpha.csv", rows)
    io.write_json(out / "summary.json", summary)
    return summary


def run_landscape(cfg: RunConfig, out: Path) -> dict:
    compile_fn = None
    if cfg.landscape.compiled:
        fn = make_compiler(cfg)

        def compile_fn(target):
            return fn("landscape", target)
    rows, summary = experiments.run_loss_landscape(cfg.landscape, cfg.seed, compile_fn)
    _write_rows(out / "landscape.csv", rows)
    io.write_json(out / "summary.json", summary)
    return summary


def run_scaling(cfg: RunConfig, out: Path) -> dict:
    rows, summary = experiments.run_scaling_study(cfg.scaling, cfg.seed)
    _write_rows(out / "scaling.csv", rows)
    io.write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# entry point


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tpqc", description="Tensor-programmable variational PDE solver (simulated).")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, help="output directory (default: $%s/<command>-<problem>-seed<seed>)"
                       % io.OUTPUT_ROOT_ENV)
        if name == "evolve":
            p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(path: Path | None, seed: int | None, out: Path | None) -> RunConfig:
    cfg = cfgmod.load(path) if path is not None else cfgmod.validate(RunConfig())
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["output"] = str(out)
    return cfgmod.resolve(dataclasses.replace(cfg, **updates))


def _error(out: Path | None, code: int, exc: BaseException, **extra) -> int:
    record = {"status": "error", "exit_code": code, "kind": type(exc).__name__, "message": str(exc), **extra}
    if out is not None:
        try:
            io.write_json(out / "error.json", record)
        except OSError:  # pragma: no cover - unwritable output directory
            pass
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    out = None
    try:
        cfg = load_config(args.config, args.seed, args.out)
        out = _out_dir(cfg, args.command)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        _echo(out, cfg, args.command)
        if args.command == "compile":
            summary = run_compile(cfg, out)
        elif args.command == "evolve":
            summary = run_evolution(cfg, out, resume=args.resume)
        elif args.command == "sweep-alpha":
            summary = run_sweep(cfg, out)
        elif args.command == "landscape":
            summary = run_landscape(cfg, out)
        else:
            summary = run_scaling(cfg, out)
    except solver.StepFailure as exc:
        extra = {"substep": exc.substep, "fidelity": exc.fidelity}
        if exc.state is not None and out is not None:
            extra["step"] = exc.state.step
            io.write_json(out / "failed_state.json", _step_record(exc.state, None, None)
                          | {"theta": exc.state.theta})
        return _error(out, EXIT_STEP, exc, **extra)
    except (ConfigError, InvalidInput) as exc:
        return _error(out, EXIT_CONFIG, exc)
    except NumericalFailure as exc:
        return _error(out, EXIT_NUMERICAL, exc)
    print(json.dumps({"status": "ok", "out": str(out), **io.jsonable(summary)}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
