"""Discrete Cauchy data on Sigma, fractional boundary norms and the aperture distance.

Boundary coordinates: a pair (f, g) of nodal traces on the Sigma nodes maps to

    [ P^{+1/4} M^{1/2} f ;  P^{-1/4} M^{1/2} g ],   P^s = U (1 + Lambda)^s U^T

where M = h^(dim-1) I is the surface mass and (U, Lambda) the eigenpairs of
the Dirichlet grid Laplacian on the Sigma rectangle.  The Euclidean norm of
these coordinates is the discrete H^{1/2}_00 + H^{-1/2} pair norm, and the
unconjugated pairing f^T M g is bounded by the product of the two halves.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridDomain, NodeClass
from .pde import DiscreteOperator, solve_generation_problem

log = logging.getLogger(__name__)

DROP_TOL = 1e-12


class MetricMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BoundaryMetric:
    """Spectral H^{+-1/2} metric on the Sigma nodes.

    Attributes
    ----------
    sigma_nodes : node indices, ascending flat order
    grid_shape : Sigma nodes per tangential axis
    mass : surface weight h**(dim-1) per node
    eigvals : eigenvalues of the surface Laplacian in the tie-broken order
    wavenumbers : (n_modes, dim-1) integer wavenumbers of each mode
    basis : Euclidean-orthonormal eigenvectors as columns (same order)
    """

    h: float
    sigma_nodes: np.ndarray
    grid_shape: tuple[int, ...]
    mass: np.ndarray
    eigvals: np.ndarray
    wavenumbers: np.ndarray
    basis: np.ndarray
    _hash: str = field(default="", repr=False)

    @property
    def size(self) -> int:
        return self.sigma_nodes.shape[0]

    @property
    def key(self) -> str:
        return self._hash

    def lap_b(self) -> np.ndarray:
        """Dense surface Laplacian (positive semidefinite, Dirichlet edges)."""
        return (self.basis * self.eigvals) @ self.basis.T

    def power(self, s: float) -> np.ndarray:
        return (self.basis * (1.0 + self.eigvals) ** s) @ self.basis.T

    @property
    def half_power(self) -> np.ndarray:
        return self.power(0.25)

    @property
    def neg_half_power(self) -> np.ndarray:
        return self.power(-0.25)

    def eigenfunction(self, k: int) -> np.ndarray:
        """Mass-normalized k-th surface mode (0-based in the metric's order)."""
        return self.basis[:, k] / np.sqrt(self.mass)

    def coordinates(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        g = np.asarray(g)
        if f.shape[0] != self.size or g.shape[0] != self.size:
            raise MetricMismatch(f"pair has {f.shape[0]}/{g.shape[0]} entries, Sigma has {self.size}")
        sq = np.sqrt(self.mass)
        if f.ndim == 2:
            sq = sq[:, None]
        return np.concatenate([self.power(0.25) @ (sq * f), self.power(-0.25) @ (sq * g)], axis=0)


def _sigma_grid(domain: GridDomain) -> tuple[np.ndarray, tuple[int, ...], list[int]]:
    nodes = domain.nodes_of_class(NodeClass.ACCESSIBLE)
    tang = [a for a in range(domain.dim) if a != domain.sigma.axis]
    multi = domain.multi_index(nodes)
    shape = tuple(int(np.ptp(multi[:, a]) + 1) for a in tang)
    if int(np.prod(shape)) != nodes.shape[0]:
        raise ValueError("Sigma nodes do not form a rectangle")
    return nodes, shape, tang


def build_metric(domain: GridDomain) -> BoundaryMetric:
    """Analytic sine eigenbasis of the Dirichlet grid Laplacian on Sigma.

    Degenerate eigenvalues are ordered by lexicographic wavenumber.
    """
    nodes, shape, tang = _sigma_grid(domain)
    h = domain.h
    multi = domain.multi_index(nodes)
    local = [multi[:, a] - multi[:, a].min() + 1 for a in tang]   # 1..n_i
    waves = np.array(list(itertools.product(*[range(1, n + 1) for n in shape])), dtype=np.int64)
    lam = np.zeros(len(waves))
    for i, n in enumerate(shape):
        lam += 4.0 / h ** 2 * np.sin(np.pi * waves[:, i] / (2 * (n + 1))) ** 2
    # quantize so analytically equal eigenvalues compare equal before the tie-break
    lam_key = np.round(lam * h ** 2, 10)
    order = np.lexsort(tuple(waves[:, i] for i in reversed(range(len(shape)))) + (lam_key,))
    waves, lam = waves[order], lam[order]
    U = np.ones((len(nodes), len(waves)))
    for i, n in enumerate(shape):
        U *= np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(local[i], waves[:, i]) / (n + 1))
    mass = np.full(len(nodes), h ** (domain.dim - 1))
    digest = hashlib.sha256()
    digest.update(np.asarray(shape, dtype=np.int64).tobytes())
    digest.update(np.float64(h).tobytes())
    digest.update(nodes.astype(np.int64).tobytes())
    for arr in (nodes, mass, lam, waves, U):
        arr.setflags(write=False)
    return BoundaryMetric(h, nodes, shape, mass, lam, waves, U, digest.hexdigest()[:16])


@dataclass(frozen=True)
class CauchyPair:
    """Dirichlet trace f and outward normal derivative g on the Sigma nodes."""

    f: np.ndarray
    g: np.ndarray


def pair_norm(metric: BoundaryMetric, pair: CauchyPair) -> float:
    return float(np.linalg.norm(metric.coordinates(pair.f, pair.g)))


def pair_bilinear(metric: BoundaryMetric, p1: CauchyPair, p2: CauchyPair) -> complex:
    """Boundary side of Green's identity: sum (f1 g2 - f2 g1) over Sigma with the surface mass."""
    return complex(np.sum(metric.mass * (p1.f * p2.g - p2.f * p1.g)))


# -- subspaces ------------------------------------------------------------------

def orthonormalize(V: np.ndarray, drop_tol: float = DROP_TOL) -> tuple[np.ndarray, int]:
    """Modified Gram-Schmidt with one reorthogonalization pass.

    Columns whose remaining norm falls below ``drop_tol`` times their original
    norm are dropped; returns the basis and the number of dropped columns.
    """
    cols = []
    dropped = 0
    for j in range(V.shape[1]):
        v = V[:, j].astype(complex)
        nrm0 = np.linalg.norm(v)
        if nrm0 == 0:
            dropped += 1
            continue
        for _ in range(2):
            for b in cols:
                v = v - (b.conj() @ v) * b
        nrm = np.linalg.norm(v)
        if nrm <= drop_tol * nrm0:
            dropped += 1
            continue
        cols.append(v / nrm)
    if not cols:
        return np.zeros((V.shape[0], 0), dtype=complex), dropped
    return np.column_stack(cols), dropped


@dataclass(frozen=True, eq=False)
class CauchySubspace:
    basis: np.ndarray
    m: int
    metric_key: str
    F: np.ndarray          # traces of the generating solutions (Sigma x m)
    G: np.ndarray          # normal derivatives
    modes: tuple[int, ...]
    dropped: int = 0

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def pair(self, k: int) -> CauchyPair:
        return CauchyPair(self.F[:, k], self.G[:, k])

    def truncated(self, m: int, metric: BoundaryMetric) -> "CauchySubspace":
        """Subspace of the first ``m`` generating solutions (no new solves)."""
        return subspace_from_pairs(metric, self.F[:, :m], self.G[:, :m], self.modes[:m])

    def dump(self, stream) -> None:
        """Text header line then the basis as little-endian complex128, column-major."""
        header = f"# cauchy-subspace m={self.m} sigma={self.basis.shape[0] // 2} rank={self.rank} metric={self.metric_key}\n"
        stream.write(header.encode("ascii"))
        stream.write(np.asfortranarray(self.basis).astype("<c16").tobytes(order="F"))


def cauchy_data(op: DiscreteOperator, metric: BoundaryMetric, modes) -> tuple[np.ndarray, np.ndarray]:
    """Solve one generation problem per surface mode; return (traces, normal derivatives)."""
    sigma_rows = op.impedance_rows
    if not np.array_equal(op.active[sigma_rows], metric.sigma_nodes):
        raise MetricMismatch("operator's Sigma nodes differ from the metric's")
    gimp = np.column_stack([metric.eigenfunction(k) for k in modes]).astype(complex)
    U = solve_generation_problem(op, gimp).values
    F = U[sigma_rows]
    Gn = op.normal_derivative(U)
    return F, Gn


def subspace_from_pairs(metric: BoundaryMetric, F, G, modes=()) -> CauchySubspace:
    coords = metric.coordinates(F, G)
    basis, dropped = orthonormalize(coords)
    if dropped:
        log.info("dropped %d rank-deficient Cauchy pairs", dropped)
    return CauchySubspace(basis, F.shape[1], metric.key, F, G, tuple(int(k) for k in modes), dropped)


def generate_cauchy_space(op: DiscreteOperator, metric: BoundaryMetric, m: int, modes=None) -> CauchySubspace:
    """Cauchy subspace spanned by the solutions with the first ``m`` surface modes as impedance data.

    ``modes`` overrides the default order (indices into the metric's modes).
    """
    if modes is None:
        if m > metric.size:
            raise ValueError(f"m = {m} exceeds the {metric.size} Sigma nodes")
        modes = range(m)
    modes = [int(k) for k in modes]
    F, G = cauchy_data(op, metric, modes)
    return subspace_from_pairs(metric, F, G, modes)


def _basis(S) -> np.ndarray:
    return S.basis if isinstance(S, CauchySubspace) else np.asarray(S)


def one_sided(S1, S2) -> float:
    """sup over unit v in S2 of dist(v, S1) = ||(I - P1) B2||_2."""
    if isinstance(S1, CauchySubspace) and isinstance(S2, CauchySubspace) and S1.metric_key != S2.metric_key:
        raise MetricMismatch("subspaces live in different metrics")
    B1, B2 = _basis(S1), _basis(S2)
    if B2.shape[1] == 0:
        return 0.0
    R = B2 - B1 @ (B1.conj().T @ B2)
    return float(min(1.0, np.linalg.norm(R, 2)))


def aperture(S1, S2) -> float:
    return max(one_sided(S1, S2), one_sided(S2, S1))


@dataclass(frozen=True)
class ApertureReport:
    d: float
    d_double: float
    drift: float
    stable: bool
    one_sided: tuple[float, float]
    flags: tuple[str, ...] = ()


def stabilized_aperture(op1: DiscreteOperator, op2: DiscreteOperator, metric: BoundaryMetric, m: int,
                        tol: float = 0.05, abs_floor: float = 1e-10) -> ApertureReport:
    """Aperture at m and 2m generated pairs (the m-space is a truncation of the 2m one)."""
    m2 = min(2 * m, metric.size)
    big1 = generate_cauchy_space(op1, metric, m2)
    big2 = generate_cauchy_space(op2, metric, m2)
    s1, s2 = big1.truncated(m, metric), big2.truncated(m, metric)
    a, b = one_sided(s1, s2), one_sided(s2, s1)
    d = max(a, b)
    dd = aperture(big1, big2)
    drift = abs(dd - d) / max(d, dd) if max(d, dd) > abs_floor else 0.0
    flags = []
    if s1.rank != s2.rank:
        flags.append("unequal_dimension")
    if drift > tol:
        flags.append("m_not_stabilized")
    return ApertureReport(d, dd, drift, drift <= tol, (a, b), tuple(flags))
