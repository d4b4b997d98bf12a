from __future__ import annotations

import io
import math

import numpy as np
import pytest

from cauchylab.cauchy import build_metric, generate_cauchy_space
from cauchylab.geometry import GeometryError, validate_chain
from cauchylab.green import green_operator
from cauchylab.pde import generation_operator, solve_generation_problem
from cauchylab.potential import extend_to_omega0
from cauchylab.probes import (
    BETA,
    alessandrini_check,
    green_identity_residual,
    singular_field,
    singular_pde_residual,
    singular_value,
    smallness_propagation_report,
    three_spheres_experiment,
    three_spheres_from_fields,
    unresolved_labels,
)


@pytest.fixture(scope="module")
def green_ops(cube8, q_pair):
    return tuple(green_operator(cube8, extend_to_omega0(q, cube8)) for q in q_pair)


@pytest.fixture(scope="module")
def chain(cube8):
    return validate_chain(cube8, [1, 2])


def test_beta():
    assert BETA == pytest.approx(math.log(8 / 7) / math.log(4))
    assert 0 < BETA < 1


def test_unresolved_labels(cube8, chain):
    assert unresolved_labels(cube8, None, 0) == (1, 2)
    assert unresolved_labels(cube8, chain, 1) == (2,)
    with pytest.raises(GeometryError):
        unresolved_labels(cube8, chain, 3)


def test_singular_value_matches_field(cube8, green_ops, chain):
    y = cube8.node_at([0.5, 0.5, 0.25])
    z = cube8.node_at([0.375, 0.5, 0.25])
    op1, op2 = green_ops
    direct = singular_value(op1, op2, y, z, chain=chain, k=1)
    field = singular_field(op1, op2, z, chain=chain, k=1)[op1.row_of[y]]
    assert abs(direct - field) <= 1e-10 * abs(direct)


def test_singular_value_vanishes_for_equal_potentials(cube8, green_ops, chain):
    y = cube8.node_at([0.5, 0.5, 0.25])
    op = green_ops[0]
    assert singular_value(op, op, y, y, chain=chain, k=1) == 0


def test_probe_inside_unresolved_rejected(cube8, green_ops, chain):
    y = cube8.node_at([0.5, 0.5, 0.75])
    with pytest.raises(GeometryError, match="touches U_k"):
        singular_value(*green_ops, y, y, chain=chain, k=1)


def test_singular_solution_pde(cube8, green_ops, chain):
    z = cube8.node_at([0.5, 0.5, 0.25])
    assert singular_pde_residual(*green_ops, z, chain, 1) <= 1e-10


@pytest.fixture(scope="module")
def gen_setup(cube8, q_pair):
    metric = build_metric(cube8)
    ops = tuple(generation_operator(cube8, q) for q in q_pair)
    return metric, ops


def test_green_identity_residual(gen_setup):
    metric, (op1, op2) = gen_setup
    rng = np.random.default_rng(2)
    n = op1.impedance_rows.size
    u1 = solve_generation_problem(op1, rng.standard_normal(n) + 1j * rng.standard_normal(n)).values
    u2 = solve_generation_problem(op2, rng.standard_normal(n)).values
    assert green_identity_residual(op1, op2, u1, u2, metric) <= 1e-8
    with pytest.raises(ValueError):
        green_identity_residual(op1, op2, u1[:-1], u2, metric)


def test_alessandrini_holds(gen_setup):
    metric, (op1, op2) = gen_setup
    S1 = generate_cauchy_space(op1, metric, 6)
    S2 = generate_cauchy_space(op2, metric, 6)
    chk = alessandrini_check(op1, op2, metric, S1, S2, 10, np.random.default_rng(0))
    assert chk.fraction == 1.0
    assert np.max(chk.residuals) <= 1e-8


@pytest.mark.parametrize("radii", [(0.125, 0.25, 0.5), (0.25, 0.375, 0.5), (0.125, 0.375, 0.625)])
def test_three_spheres_monomial_oracle(radii):
    """Re((x - c)^3) in the plane has ball maxima r^3, so tau = log(r3/r2) / log(r3/r1)."""
    h = 0.125
    ax = np.arange(-6, 7) * h
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    coords = np.column_stack([X.ravel(), Y.ravel()])
    vals = ((coords[:, 0] + 1j * coords[:, 1]) ** 3).real
    res = three_spheres_from_fields(coords, vals, (0.0, 0.0), radii)
    r1, r2, r3 = radii
    assert res.tau_hat[0] == pytest.approx(math.log(r3 / r2) / math.log(r3 / r1), abs=1e-6)


def test_three_spheres_radii_validated():
    with pytest.raises(ValueError):
        three_spheres_from_fields(np.zeros((1, 2)), np.ones(1), (0, 0), (0.3, 0.2, 0.4))


def test_three_spheres_experiment(gen_setup):
    _, (op1, _) = gen_setup
    res = three_spheres_experiment(op1, (0.5, 0.5, 0.5), (0.125, 0.25, 0.375), 8, np.random.default_rng(0))
    assert res.tau_hat.size + res.skipped == 8
    assert np.all((res.tau_hat > 0) & (res.tau_hat < 1))
    with pytest.raises(GeometryError):
        three_spheres_experiment(op1, (0.5, 0.5, 0.5), (0.125, 0.25, 0.5), 2, np.random.default_rng(0))


def test_smallness_report(green_ops, chain):
    rep = smallness_propagation_report(*green_ops, chain, 1, [1, 2])
    assert len(rep.S) == 2 and set(rep.slopes) == {"first_ratio", "second_ratio"}
    assert rep.pde_residual <= 1e-10
    assert any("below_4h" in f for f in rep.flags)
    buf = io.StringIO()
    rep.write_csv(buf)
    assert buf.getvalue().startswith("r,abs_S")
    with pytest.raises(GeometryError):
        smallness_propagation_report(*green_ops, chain, 2, [1])


def test_smallness_report_zero_difference(green_ops, chain):
    op = green_ops[0]
    rep = smallness_propagation_report(op, op, chain, 1, [1, 2])
    assert all(math.isnan(v) for v in rep.slopes.values())
