from __future__ import annotations

import io

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cauchylab.cauchy import (
    CauchyPair,
    MetricMismatch,
    aperture,
    build_metric,
    generate_cauchy_space,
    one_sided,
    orthonormalize,
    pair_bilinear,
    pair_norm,
    stabilized_aperture,
)
from cauchylab.fixtures import build_fixture
from cauchylab.pde import generation_operator


@pytest.fixture(scope="module")
def metric(cube8):
    return build_metric(cube8)


@pytest.fixture(scope="module")
def gen_ops(cube8, q_pair):
    return generation_operator(cube8, q_pair[0]), generation_operator(cube8, q_pair[1])


def _grid_laplacian(shape, h):
    """Independent assembly: Kronecker sum of 1-D Dirichlet second differences."""
    ops = [sp.diags([-1, 2, -1], [-1, 0, 1], shape=(n, n)) / h ** 2 for n in shape]
    L = ops[0]
    for op in ops[1:]:
        L = sp.kron(L, sp.identity(op.shape[0])) + sp.kron(sp.identity(L.shape[0]), op)
    return L.toarray()


def test_metric_matches_grid_laplacian(metric, cube8):
    assert metric.grid_shape == (7, 7)
    assert np.allclose(metric.lap_b(), _grid_laplacian(metric.grid_shape, cube8.h), atol=1e-9)


def test_basis_orthonormal_and_sorted(metric):
    U = metric.basis
    assert np.allclose(U.T @ U, np.eye(metric.size), atol=1e-12)
    assert np.all(np.diff(metric.eigvals) >= -1e-9)


def test_degenerate_modes_lexicographic(metric):
    # (1,2) and (2,1) share an eigenvalue; (1,2) comes first
    assert metric.wavenumbers[0].tolist() == [1, 1]
    assert metric.wavenumbers[1].tolist() == [1, 2]
    assert metric.wavenumbers[2].tolist() == [2, 1]


def test_power_inverse(metric):
    assert np.allclose(metric.power(0.25) @ metric.power(-0.25), np.eye(metric.size), atol=1e-10)


def test_eigenfunction_mass_normalized(metric):
    e = metric.eigenfunction(3)
    assert np.sum(metric.mass * e ** 2) == pytest.approx(1.0)


def test_key_depends_on_grid(metric):
    assert metric.key == build_metric(build_fixture("two-half-cube", 1 / 8)).key
    assert metric.key != build_metric(build_fixture("two-half-cube", 1 / 4)).key


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pairing_bounded_by_half_norms(seed):
    metric = build_metric(build_fixture("two-half-cube", 1 / 4))
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((2, metric.size))
    c = metric.coordinates(f, g)
    n = metric.size
    assert abs(np.sum(metric.mass * f * g)) <= np.linalg.norm(c[:n]) * np.linalg.norm(c[n:]) * (1 + 1e-12)


def test_coordinates_size_checked(metric):
    with pytest.raises(MetricMismatch):
        metric.coordinates(np.zeros(3), np.zeros(3))


def test_orthonormalize_drops_dependent():
    rng = np.random.default_rng(0)
    V = rng.standard_normal((6, 3))
    V = np.column_stack([V, V[:, 0] + 2 * V[:, 1]])
    B, dropped = orthonormalize(V)
    assert dropped == 1 and B.shape == (6, 3)
    assert np.allclose(B.conj().T @ B, np.eye(3), atol=1e-12)


def test_aperture_of_lines_is_sine():
    theta = 0.3
    u = np.array([[1.0], [0.0]])
    v = np.array([[np.cos(theta)], [np.sin(theta)]])
    assert aperture(u, v) == pytest.approx(np.sin(theta), abs=1e-14)


def test_nested_subspaces_one_sided():
    B = np.eye(4)[:, :3]
    assert one_sided(B, B[:, :2]) == pytest.approx(0.0, abs=1e-15)
    assert one_sided(B[:, :2], B) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_aperture_bounds_and_symmetry(seed, k):
    rng = np.random.default_rng(seed)
    B1, _ = orthonormalize(rng.standard_normal((8, k)) + 1j * rng.standard_normal((8, k)))
    B2, _ = orthonormalize(rng.standard_normal((8, k)) + 1j * rng.standard_normal((8, k)))
    d = aperture(B1, B2)
    assert 0.0 <= d <= 1.0
    assert d == aperture(B2, B1)
    a, b = one_sided(B1, B2), one_sided(B2, B1)
    if max(a, b) < 1 - 1e-9:
        assert a == pytest.approx(b, abs=1e-10)


def test_generated_space(gen_ops, metric):
    S = generate_cauchy_space(gen_ops[0], metric, 6)
    assert S.rank == 6 and S.dropped == 0
    assert S.basis.shape == (2 * metric.size, 6)
    assert aperture(S, S) <= 1e-12
    with pytest.raises(ValueError):
        generate_cauchy_space(gen_ops[0], metric, metric.size + 1)


def test_truncation_matches_direct(gen_ops, metric):
    big = generate_cauchy_space(gen_ops[0], metric, 8)
    small = generate_cauchy_space(gen_ops[0], metric, 4)
    assert aperture(big.truncated(4, metric), small) <= 1e-12


def test_metric_mismatch(gen_ops, metric):
    other = build_metric(build_fixture("two-half-cube", 1 / 4))
    S = generate_cauchy_space(gen_ops[0], metric, 2)
    T = generate_cauchy_space(generation_operator(build_fixture("two-half-cube", 1 / 4), gen_ops[0].q), other, 2)
    with pytest.raises(MetricMismatch):
        aperture(S, T)


def test_pair_helpers(gen_ops, metric):
    S = generate_cauchy_space(gen_ops[0], metric, 2)
    p = S.pair(0)
    assert isinstance(p, CauchyPair)
    assert pair_norm(metric, p) > 0
    assert pair_bilinear(metric, p, p) == 0


def test_stabilized_aperture(gen_ops, metric):
    same = stabilized_aperture(gen_ops[0], gen_ops[0], metric, 4)
    assert same.d <= 1e-10 and same.stable
    diff = stabilized_aperture(gen_ops[0], gen_ops[1], metric, 4)
    assert diff.d > 1e-8
    assert diff.d_double >= 0


def test_dump_header(gen_ops, metric):
    S = generate_cauchy_space(gen_ops[0], metric, 3)
    buf = io.BytesIO()
    S.dump(buf)
    raw = buf.getvalue()
    header, _, body = raw.partition(b"\n")
    assert header.startswith(b"# cauchy-subspace m=3")
    assert len(body) == S.basis.size * 16
