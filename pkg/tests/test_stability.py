from __future__ import annotations

import dataclasses
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cauchylab.cauchy import build_metric
from cauchylab.fixtures import build_fixture, fixture_spec
from cauchylab.geometry import build_augmented_domain, validate_chain
from cauchylab.green import green_operator
from cauchylab.potential import PiecewiseLinearPotential, coefficient_box, extend_to_omega0
from cauchylab.stability import (
    ForwardModel,
    Modulus,
    boundary_stability_probe,
    draw_pair,
    fixture_hash,
    modulus_eval,
    omega,
    power_iteration,
    reconstruct,
    stability_sweep,
)

E2 = math.exp(-2)


@pytest.fixture(scope="module")
def cube4():
    return build_fixture("two-half-cube", 1 / 4)


def test_modulus_examples():
    assert omega(1.0, math.exp(-4)) == pytest.approx(E2 / 2)
    for b in (0.5, 1.0, 3.0):
        assert omega(b, 1.0) == pytest.approx(E2)
    with pytest.raises(ValueError):
        omega(1.0, 0.0)


def test_modulus_compositions():
    t = np.array([1e-8, 1e-3])
    assert np.allclose(modulus_eval(Modulus(1.0, 2), t), omega(1.0, omega(1.0, t)))
    assert np.allclose(modulus_eval(Modulus(1.0, 0, 0.25), t), t ** 0.25)
    with pytest.raises(ValueError):
        Modulus(-1.0)
    with pytest.raises(ValueError):
        Modulus(1.0, 0, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-12, 10.0), st.floats(0.05, 2.0), st.integers(1, 3))
def test_modulus_range_and_monotone(t, b, j):
    mod = Modulus(b, j)
    v = modulus_eval(mod, t)
    assert 0 < v <= E2 * (1 + 1e-15)
    assert modulus_eval(mod, t * 1.5) >= v * (1 - 1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-30, 5.0), st.floats(0.01, 0.99), st.floats(0.1, 2.0))
def test_modulus_dilation_bounds(t, beta, b):
    w = float(omega(b, t))
    assert omega(b, t / beta) <= (1 + abs(math.log(beta)) / 2) ** b * w * (1 + 1e-12)
    assert omega(b, t ** beta) <= beta ** -b * w * (1 + 1e-12)


@pytest.mark.parametrize("b", [0.25, 0.5, 1.0])
def test_modulus_midpoint_concave(b):
    t = np.logspace(-12, 0, 400)
    mid = omega(b, (t[:-1] + t[1:]) / 2)
    assert np.all(mid >= (omega(b, t[:-1]) + omega(b, t[1:])) / 2 * (1 - 1e-12))


def test_draw_pair_admissible(cube4):
    rng = np.random.default_rng(0)
    a_max, A_max = coefficient_box(cube4, 10.0)
    for _ in range(20):
        q1, q2 = draw_pair(rng, cube4, 10.0)
        for q in (q1, q2):
            assert np.all(np.abs(q.a) <= a_max + 1e-12) and np.all(np.abs(q.A) <= A_max + 1e-12)


@pytest.fixture(scope="module")
def sweep(cube4):
    return stability_sweep(cube4, 3, seed=11, m=4)


def test_sweep_records(sweep):
    kinds = [r.kind for r in sweep.records]
    assert kinds == ["random"] * 3 + ["identical", "scaling", "scaling"]
    ident = sweep.records[3]
    assert ident.E == 0 and ident.eps0 <= 1e-10 and ident.ratio is None
    s1, s2 = sweep.records[4:]
    assert s1.E == pytest.approx(10 * s2.E)
    assert s1.eps0 > s2.eps0
    assert sweep.summary["scaling_ratio_drift"] <= 3
    assert sweep.summary["injectivity_ok"]
    for r in sweep.records:
        assert 0 <= r.eps0 <= 1


def test_sweep_summary_keys(sweep):
    for key in ("fixture", "h", "m", "n_samples", "seed", "max_ratio", "median_ratio", "spearman", "flags"):
        assert key in sweep.summary
    assert "metric_relative" in sweep.summary["flags"]


def test_sweep_samples_independent_of_count(cube4, sweep):
    short = stability_sweep(cube4, 2, seed=11, m=4)
    assert short.records[:2] == sweep.records[:2]


def test_sweep_csv_deterministic(cube4, sweep):
    again = stability_sweep(cube4, 3, seed=11, m=4)
    a, b = io.StringIO(), io.StringIO()
    sweep.write_csv(a)
    again.write_csv(b)
    assert a.getvalue() == b.getvalue()
    assert sweep.summary_json() == again.summary_json()


def test_sweep_rejects_empty(cube4):
    with pytest.raises(ValueError, match="n_samples"):
        stability_sweep(cube4, 0, seed=0, m=2)


def test_fixture_hash_tracks_grid(cube4):
    assert fixture_hash(cube4) == fixture_hash(build_fixture("two-half-cube", 1 / 4))
    assert fixture_hash(cube4) != fixture_hash(build_fixture("two-half-cube", 1 / 8))


def test_power_iteration():
    H = np.diag([1.0, 5.0, 2.0])
    assert power_iteration(H) == pytest.approx(5.0)


@pytest.fixture(scope="module")
def model(cube4):
    return ForwardModel(cube4, build_metric(cube4), tuple(range(4)))


def test_adjoint_gradient_matches_fd(model):
    rng = np.random.default_rng(4)
    truth = rng.uniform(-1, 1, model.n_params)
    obs = model.traces(truth)
    theta = truth + 0.3 * rng.standard_normal(model.n_params)
    _, grad, _ = model.gradient(theta, obs)
    step = 1e-5
    for p in range(model.n_params):
        e = np.zeros(model.n_params)
        e[p] = step
        fd = (model.misfit(theta + e, obs) - model.misfit(theta - e, obs)) / (2 * step)
        assert fd == pytest.approx(grad[p], rel=1e-5, abs=1e-12 * np.max(np.abs(grad)))


def test_gauss_newton_psd(model):
    H = model.gauss_newton(np.zeros(model.n_params))
    assert np.allclose(H, H.T)
    assert np.min(np.linalg.eigvalsh(H)) >= -1e-10 * np.max(np.abs(H))


def test_reconstruct_from_truth_converges_immediately(model):
    truth = np.linspace(-1, 1, model.n_params)
    res = reconstruct(model, model.traces(truth), truth, 10.0, theta_true=truth)
    assert res.converged and res.iterations == 0


@pytest.mark.parametrize("gram", ["gauss-newton", "jacobi", "identity"])
def test_reconstruct_monotone_and_in_box(model, gram):
    rng = np.random.default_rng(1)
    truth = rng.uniform(-1, 1, model.n_params)
    res = reconstruct(model, model.traces(truth), np.zeros(model.n_params), 10.0, iterations=6,
                      theta_true=truth, gram=gram)
    misfits = [row["misfit"] for row in res.trace]
    assert all(b <= a for a, b in zip(misfits, misfits[1:]))
    a_max, A_max = coefficient_box(model.domain, 10.0)
    t = res.theta.reshape(-1, 4)
    assert np.all(np.abs(t[:, 0]) <= a_max) and np.all(np.abs(t[:, 1:]) <= A_max)
    buf = io.StringIO()
    res.write_csv(buf)
    assert buf.getvalue().startswith("iter,misfit,aperture,coefficient_error")


def test_reconstruct_recovers_small_problem():
    # h = 1/4 leaves the linear parts unidentifiable; 1/6 is the coarsest grid that resolves them
    dom = build_fixture("two-half-cube", 1 / 6)
    model = ForwardModel(dom, build_metric(dom), tuple(range(8)))
    rng = np.random.default_rng(2)
    truth = rng.uniform(-1, 1, model.n_params)
    res = reconstruct(model, model.traces(truth), np.zeros(model.n_params), 10.0, iterations=100,
                      theta_true=truth)
    assert res.trace[-1]["coefficient_error"] <= 0.01


def test_boundary_probe_truth():
    # a thick D_0 keeps the order-2 stencils of the deeper probes off Sigma_0
    cube8 = build_augmented_domain(dataclasses.replace(fixture_spec("two-half-cube"), d0_thickness=1.0), 1 / 8)
    chain = validate_chain(cube8, [1, 2])
    q1 = PiecewiseLinearPotential(np.array([1.5, 0.0]), np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]))
    q2 = PiecewiseLinearPotential.constant(1.0, 2, 3)
    ops = [green_operator(cube8, extend_to_omega0(q, cube8)) for q in (q1, q2)]
    rep = boundary_stability_probe(*ops, chain, [1, 2, 3])
    assert rep.truth_jump == pytest.approx(0.5)
    assert rep.truth_slope == pytest.approx(1.0)
    assert any("below_4h" in f for f in rep.flags)
    assert rep.jump_error is not None and math.isfinite(rep.jump)
    with pytest.raises(ValueError):
        boundary_stability_probe(*ops, chain, [1, 2])
