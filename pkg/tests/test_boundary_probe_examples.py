"""Synthetic-truth examples for the boundary-value probe on the h = 1/16 fixture."""

from __future__ import annotations

import numpy as np
import pytest

from cauchylab.fixtures import build_fixture
from cauchylab.geometry import validate_chain
from cauchylab.green import green_operator, loglog_slope
from cauchylab.potential import PiecewiseLinearPotential, extend_to_omega0, random_potential
from cauchylab.stability import boundary_stability_probe

STEPS = [1, 2, 3, 4, 5, 6]


@pytest.fixture(scope="module")
def setup():
    dom = build_fixture("two-half-cube", 1 / 16)
    chain = validate_chain(dom, [1, 2])
    q1 = random_potential(np.random.default_rng(3), dom, 10.0)
    return dom, chain, q1


def _probe(setup, a, A):
    dom, chain, q1 = setup
    dq = PiecewiseLinearPotential(np.array(a, dtype=float), np.array(A, dtype=float))
    ops = [green_operator(dom, extend_to_omega0(q, dom)) for q in (q1, q1 - dq)]
    return boundary_stability_probe(*ops, chain, STEPS)


def test_local_constant_jump(setup):
    rep = _probe(setup, [0.5, 0.0], np.zeros((2, 3)))
    assert rep.truth_jump == pytest.approx(0.5)
    assert rep.jump_error <= 0.20


def test_deeper_difference_invisible(setup):
    rep = _probe(setup, [0.0, 1.0], np.zeros((2, 3)))
    assert abs(rep.jump) <= 0.1 * 1.0


def test_pure_normal_gradient(setup):
    rep = _probe(setup, [0.0, 0.0], [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    assert rep.truth_jump == pytest.approx(0.0, abs=1e-12)
    assert rep.truth_slope == pytest.approx(1.0)
    assert np.sign(rep.normal_slope) == np.sign(rep.truth_slope)
    assert rep.slope_error <= 0.30
    # order-1 probe sees no constant part, relative to the order-1 scale of a unit jump
    assert abs(rep.jump) <= 0.1


def test_order_two_grows_faster(setup):
    rep = _probe(setup, [0.5, 0.0], np.zeros((2, 3)))
    slope, _ = loglog_slope(rep.radii, np.abs(rep.second) / np.abs(rep.first))
    assert -2.5 <= slope <= -1.5
