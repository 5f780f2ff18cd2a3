"""Shared fixtures: hypothesis profile, a persistent operator cache and small compiled operators."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tpqc.compiler import compile_mpo
from tpqc.io import OperatorCache

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REPO = Path(__file__).resolve().parents[1]
CACHE_ENV = "TPQC_TEST_CACHE"


@pytest.fixture(scope="session")
def operator_cache() -> OperatorCache:
    """Compiled operators survive across sessions; entries are re-verified by the tests that use them."""
    return OperatorCache(Path(os.environ.get(CACHE_ENV, REPO / ".tpqc-cache")))


@pytest.fixture(scope="session")
def compile_cached(operator_cache):
    def run(target, Z: int = 16, accept: float = 1e-8, **kwargs):
        op = operator_cache.get(target, Z, accept)
        if op is None:
            op = compile_mpo(target, Z, **kwargs)
            operator_cache.put(target, Z, op)
        return op

    return run


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line; the lines are printed at the end of the session."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
