from __future__ import annotations

import json

import pytest

from tpqc.config import ConfigError, RunConfig, from_dict, load, resolve, to_dict, validate


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"problem": {"name": "burgers", "size": 6}},
    {"optimizer": {"learning_rate": 0.1}},
    {"sweep": {"operators": ["identity"], "n_maximum": 8}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown keys"):
        from_dict(data)


@pytest.mark.parametrize("data", [
    {"problem": {"n": "six"}},
    {"problem": {"n": 6.0}},
    {"oracle": 1},
    {"seed": True},
    {"compile": {"tol": float("nan")}},
    {"sweep": {"sigmas": 0.1}},
    {"problem": []},
])
def test_wrong_types_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


@pytest.mark.parametrize("data", [
    {"problem": {"name": "heat"}},
    {"problem": {"n": 1}},
    {"compile": {"Z": 12}},
    {"time": {"steps": -1}},
    {"optimizer": {"fidelity_threshold": 0.0}},
    {"mode": {"kind": "noisy"}},
    {"checkpoint_every": 0},
])
def test_out_of_range_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


@pytest.mark.parametrize("name,layers,scheme,steps", [
    ("burgers", 10, "euler", 60),
    ("linear_euler", 14, "rk4", 45),
    ("advection_diffusion", 10, "euler", 100),
])
def test_resolve_problem_defaults(name, layers, scheme, steps):
    cfg = resolve(from_dict({"problem": {"name": name}}))
    assert cfg.ansatz.layers == layers
    assert cfg.time.scheme == scheme
    assert cfg.time.steps == steps
    assert cfg.time.dt > 0 and cfg.optimizer.lr > 0 and cfg.optimizer.epochs > 0


def test_burgers_dt_is_half_grid_spacing():
    import math

    cfg = resolve(from_dict({"problem": {"name": "burgers", "n": 6}}))
    assert cfg.time.dt == pytest.approx(0.5 * 2 * math.pi / 64)


def test_round_trip_and_file_loading(tmp_path):
    cfg = resolve(from_dict({"problem": {"name": "linear_euler"}, "seed": 7}))
    assert from_dict(json.loads(json.dumps(to_dict(cfg)))) == cfg
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3}))
    assert load(path).seed == 3
    assert validate(RunConfig()) == RunConfig()


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load(bad)


def test_shipped_configs_load():
    from pathlib import Path

    for path in sorted((Path(__file__).resolve().parents[1] / "scripts" / "configs").glob("*.json")):
        resolve(load(path))
