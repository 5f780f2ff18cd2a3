from __future__ import annotations

import json

import numpy as np
import pytest

from tpqc.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_STEP, main
from tpqc.io import checkpoint_path, load_mpo, read_csv, read_jsonl
from tpqc.mpo import mpo_to_dense
from tpqc.solver import burgers


@pytest.fixture
def small(tmp_path):
    """Writes a fast Burgers config (3 qubits) and returns a helper to run the CLI on it."""
    cache = tmp_path / "cache"

    def write(name="cfg.json", **overrides):
        data = {
            "problem": {"name": "burgers", "n": 3},
            "compile": {"Z": 4, "cache_dir": str(cache)},
            "ansatz": {"layers": 4},
            "time": {"steps": 2},
            "optimizer": {"epochs": 200, "refine_iters": 500, "init_restarts": 2, "init_epochs": 300},
            "mode": {"metrics": "branch"},
        }
        for section, values in overrides.items():
            if isinstance(values, dict):
                data.setdefault(section, {}).update(values)
            else:
                data[section] = values
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return write


def run(*args) -> int:
    return main([str(a) for a in args])


def test_evolve_outputs(small, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("evolve", "--config", small(), "--out", out, "--seed", 5) == EXIT_OK
    status = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert status["status"] == "ok"
    echo = json.loads((out / "config.json").read_text())
    assert echo["command"] == "evolve" and echo["seed"] == 5 and echo["time"]["dt"] > 0
    rows = read_csv(out / "fields.csv")
    assert len(rows) == 3 * 8 and set(rows[0]) == {"step", "t", "x", "u", "u_ref"}
    metrics = read_jsonl(out / "metrics.jsonl")
    assert [m["step"] for m in metrics] == [0, 1, 2]
    assert all(m["rel_error"]["u"] < 1e-5 for m in metrics)
    for step in range(3):
        assert checkpoint_path(out, step).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 2 and summary["max_rel_error"]["u"] == max(m["rel_error"]["u"] for m in metrics)
    # 17 significant digits
    assert all(len(r["u"].lstrip("-").replace(".", "").split("e")[0].lstrip("0")) <= 17 for r in rows)


def test_zero_steps(small, tmp_path):
    out = tmp_path / "zero"
    assert run("evolve", "--config", small(time={"steps": 0}), "--out", out) == EXIT_OK
    assert [m["step"] for m in read_jsonl(out / "metrics.jsonl")] == [0]
    assert json.loads((out / "summary.json").read_text())["steps"] == 0


def test_resume_reproduces_uninterrupted_run(small, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("evolve", "--config", small("a.json", time={"steps": 3}), "--out", full) == EXIT_OK
    assert run("evolve", "--config", small("b.json", time={"steps": 1}), "--out", part) == EXIT_OK
    assert run("evolve", "--config", small("a.json", time={"steps": 3}), "--out", part, "--resume") == EXIT_OK
    assert (full / "fields.csv").read_bytes() == (part / "fields.csv").read_bytes()
    strip = [{k: v for k, v in m.items() if k != "seconds"} for m in read_jsonl(full / "metrics.jsonl")]
    assert strip == [{k: v for k, v in m.items() if k != "seconds"} for m in read_jsonl(part / "metrics.jsonl")]


def test_resume_after_partial_outputs(small, tmp_path):
    """Rows written after the last checkpoint are dropped before continuing."""
    out = tmp_path / "r"
    cfg = small(time={"steps": 2}, checkpoint_every=2)
    assert run("evolve", "--config", cfg, "--out", out) == EXIT_OK
    reference = (out / "fields.csv").read_bytes()
    checkpoint_path(out, 2).unlink()
    assert run("evolve", "--config", cfg, "--out", out, "--resume") == EXIT_OK
    assert (out / "fields.csv").read_bytes() == reference


def test_config_error_exit_code(small, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"problem": {"name": "burgers", "typo": 1}}))
    assert run("evolve", "--config", bad, "--out", tmp_path / "o") == EXIT_CONFIG
    assert run("evolve", "--config", tmp_path / "missing.json") == EXIT_CONFIG
    out = tmp_path / "scheme"
    assert run("evolve", "--config", small(time={"scheme": "rk4"}), "--out", out) == EXIT_CONFIG
    err = json.loads((out / "error.json").read_text())
    assert err["exit_code"] == EXIT_CONFIG and err["kind"] == "ConfigError"


def test_step_failure_exit_code(small, tmp_path):
    out = tmp_path / "fail"
    cfg = small(ansatz={"layers": 1}, optimizer={"fidelity_threshold": 1.0, "epochs": 5, "refine": "none",
                                                 "init_restarts": 1, "init_epochs": 20})
    assert run("evolve", "--config", cfg, "--out", out) == EXIT_STEP
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "StepFailure" and err["exit_code"] == EXIT_STEP and err["fidelity"] < 1.0
    failed = json.loads((out / "failed_state.json").read_text())
    assert failed["step"] == 1 and "theta" in failed


def test_numerical_failure_exit_code(tmp_path):
    cfg = tmp_path / "blow.json"
    cfg.write_text(json.dumps({
        "problem": {"name": "advection_diffusion", "n": 3},
        "compile": {"Z": 4, "cache_dir": str(tmp_path / "cache")},
        "ansatz": {"layers": 2},
        "time": {"dt": 5.0, "steps": 40},
    }))
    out = tmp_path / "blow"
    assert run("evolve", "--config", cfg, "--out", out) == EXIT_NUMERICAL
    assert json.loads((out / "error.json").read_text())["kind"] == "StabilityError"


def test_compile_command_and_cache(small, tmp_path):
    out = tmp_path / "comp"
    assert run("compile", "--config", small(), "--out", out) == EXIT_OK
    target = burgers(3)
    for name in ("lin", "nonlin"):
        np.testing.assert_allclose(mpo_to_dense(load_mpo(out / "mpo" / f"{name}.json")),
                                   mpo_to_dense(target.targets[name]), atol=0)
        assert (out / "compiled" / f"{name}.json").exists()
    rows = read_csv(out / "compile.csv")
    assert {r["name"] for r in rows} == {"lin", "nonlin"}
    assert all(float(r["fit_error"]) <= 1e-8 for r in rows)
    again = tmp_path / "comp2"
    assert run("compile", "--config", small(), "--out", again) == EXIT_OK
    assert all(r["cache_hit"] == "True" for r in read_csv(again / "compile.csv"))


def test_default_output_root(small, tmp_path, monkeypatch):
    monkeypatch.setenv("TPQC_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run("evolve", "--config", small(time={"steps": 0}), "--seed", 9) == EXIT_OK
    assert (tmp_path / "root" / "evolve-burgers-seed9" / "fields.csv").exists()


def test_experiment_commands(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({
        "sweep": {"operators": ["identity", "first_derivative"], "n_min": 3, "n_max": 5, "sigmas": [0.01],
                  "pointwise_n_max": 8, "grid_sigmas": [0.5], "grid_n_max": 10},
        "landscape": {"n_values": [4], "layers": 2, "points": 9, "shots": [0, 100], "repeats": 2,
                      "restarts": 1, "init_epochs": 50},
        "scaling": {"n_values": [3], "field": "constant"},
    }))
    for command, csv in (("sweep-alpha", "sweep_alpha.csv"), ("landscape", "landscape.csv"),
                         ("scaling", "scaling.csv")):
        out = tmp_path / command
        assert run(command, "--config", cfg, "--out", out) == EXIT_OK
        assert read_csv(out / csv)
        assert json.loads((out / "summary.json").read_text())
