import csv
import io

import numpy as np
import pytest

from kvrunahead import ModelConfig, init_weights


def make_context(C, d_model, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal((C, d_model)).astype(dtype)


def rel_dev(actual, expected):
    expected = np.asarray(expected, dtype=np.float64)
    scale = float(np.max(np.abs(expected))) or 1.0
    return float(np.max(np.abs(np.asarray(actual, dtype=np.float64) - expected))) / scale


def read_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def mha():
    return init_weights(ModelConfig(d_model=8, n_heads=2, n_layers=2, seed=7))


@pytest.fixture
def gqa():
    return init_weights(ModelConfig(d_model=16, n_heads=4, n_kv_heads=2, n_layers=2, seed=3))


@pytest.fixture
def gqa32():
    return init_weights(
        ModelConfig(d_model=16, n_heads=4, n_kv_heads=2, n_layers=2, seed=3, precision="f32")
    )


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance verdict; shown again in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
