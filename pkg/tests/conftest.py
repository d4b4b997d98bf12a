from __future__ import annotations

import sys

import numpy as np
import pytest

from cauchylab.fixtures import build_fixture
from cauchylab.potential import PiecewiseLinearPotential


@pytest.fixture(scope="session")
def cube8():
    """Coarse dim-3 two-half-cube, cheap enough for every unit test."""
    return build_fixture("two-half-cube", 1 / 8)


@pytest.fixture(scope="session")
def squares8():
    return build_fixture("squares-2x2", 1 / 8)


@pytest.fixture(scope="session")
def q_pair(cube8):
    q1 = PiecewiseLinearPotential(np.array([1.0, -2.0]), np.array([[0.0, 0.0, 0.0], [0.0, 0.3, 0.5]]))
    q2 = PiecewiseLinearPotential(np.array([1.0, -1.0]), np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.5]]))
    return q1, q2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", {})
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=int):
            terminalreporter.write_line(results[key])
