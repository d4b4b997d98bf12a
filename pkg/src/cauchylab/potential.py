"""Piecewise-linear potentials q(x) = sum_j (a_j + A_j . x) chi_{D_j}(x)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, GridDomain


@dataclass(frozen=True, eq=False)
class PiecewiseLinearPotential:
    """Affine coefficients per subdomain.

    ``a[j-1], A[j-1]`` describe D_j.  When ``extended`` is set the potential
    also lives on D_0 with the constant value ``d0_value``.
    """

    a: np.ndarray
    A: np.ndarray
    e0_bound: float = np.inf
    extended: bool = False
    d0_value: float = 1.0

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1)
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != a.shape[0]:
            raise ValueError("A must have one row per subdomain")
        a.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "A", A)

    @classmethod
    def constant(cls, value: float, n_sub: int, dim: int, e0_bound: float = np.inf):
        return cls(np.full(n_sub, float(value)), np.zeros((n_sub, dim)), e0_bound)

    @classmethod
    def from_theta(cls, theta, n_sub: int, dim: int, e0_bound: float = np.inf):
        """Inverse of :meth:`theta`: ``[a_1, A_1, a_2, A_2, ...]``."""
        t = np.asarray(theta, dtype=float).reshape(n_sub, dim + 1)
        return cls(t[:, 0], t[:, 1:], e0_bound)

    @classmethod
    def from_mapping(cls, data: dict, dim: int) -> "PiecewiseLinearPotential":
        """Parse ``{"e0": ..., "pieces": [{"a": .., "A": [..]}, ...]}``."""
        pieces = data["pieces"]
        a = [float(p.get("a", 0.0)) for p in pieces]
        A = [list(map(float, p.get("A", [0.0] * dim))) for p in pieces]
        if any(len(row) != dim for row in A):
            raise ValueError("potential: every A must have dim entries")
        return cls(np.array(a), np.array(A), float(data.get("e0", np.inf)))

    @property
    def n_sub(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def theta(self) -> np.ndarray:
        return np.column_stack([self.a, self.A]).ravel()

    def _coeffs(self, label: int):
        if label == 0:
            if not self.extended:
                raise GeometryError("potential is not defined on D_0; extend it first")
            return self.d0_value, np.zeros(self.dim)
        if not 1 <= label <= self.n_sub:
            raise GeometryError(f"no subdomain with label {label}")
        return self.a[label - 1], self.A[label - 1]

    def piece_values(self, labels: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Affine value of the piece named by ``labels`` at ``points`` (vectorized).

        Labels outside the potential's support give 0.
        """
        labels = np.asarray(labels)
        coef_a = np.zeros(self.n_sub + 1)
        coef_A = np.zeros((self.n_sub + 1, self.dim))
        coef_a[1:] = self.a
        coef_A[1:] = self.A
        if self.extended:
            coef_a[0] = self.d0_value
        valid = (labels >= 0) & (labels <= self.n_sub)
        safe = np.where(valid, labels, 0)
        vals = coef_a[safe] + np.einsum("...i,...i->...", coef_A[safe], points)
        valid &= (labels > 0) | self.extended
        return np.where(valid, vals, 0.0)

    def __sub__(self, other: "PiecewiseLinearPotential") -> "PiecewiseLinearPotential":
        return PiecewiseLinearPotential(
            self.a - other.a, self.A - other.A, np.inf, self.extended and other.extended,
            self.d0_value - other.d0_value)

    def __add__(self, other: "PiecewiseLinearPotential") -> "PiecewiseLinearPotential":
        return PiecewiseLinearPotential(
            self.a + other.a, self.A + other.A, np.inf, self.extended and other.extended,
            self.d0_value + other.d0_value)

    def scaled(self, c: float) -> "PiecewiseLinearPotential":
        return PiecewiseLinearPotential(c * self.a, c * self.A, np.inf, self.extended, c * self.d0_value)

    def __repr__(self) -> str:
        return f"PiecewiseLinearPotential(a={self.a.tolist()}, A={self.A.tolist()}, extended={self.extended})"


def eval_at(q: PiecewiseLinearPotential, domain: GridDomain, node: int) -> float:
    """Value of q at a grid node; interface nodes use the lower subdomain index."""
    label = int(domain.subdomain[node]) if q.extended else int(domain.omega_label[node])
    if label < 0:
        raise GeometryError(f"node {node} lies outside the domain of q")
    if label == 0 and not q.extended:
        raise GeometryError(f"node {node} lies outside the domain of q")
    a, A = q._coeffs(label)
    return float(a + A @ domain.coords(node).ravel())


def coeff_norm(q: PiecewiseLinearPotential) -> float:
    """max_j (|a_j| + |A_j|) with the Euclidean norm on A_j."""
    if q.n_sub == 0:
        return 0.0
    return float(np.max(np.abs(q.a) + np.linalg.norm(q.A, axis=1)))


def sup_norm(q: PiecewiseLinearPotential, domain: GridDomain) -> float:
    """Exact sup of |q| over Omega (or Omega_0 if extended) by corner enumeration."""
    best = 0.0
    for j, box in enumerate(domain.subdomain_boxes, start=1):
        vals = q.a[j - 1] + box.corners() @ q.A[j - 1]
        best = max(best, float(np.max(np.abs(vals))))
    if q.extended:
        best = max(best, abs(q.d0_value))
    return best


def extend_to_omega0(q: PiecewiseLinearPotential, domain: GridDomain) -> PiecewiseLinearPotential:
    """q on Omega, the constant 1 on D_0."""
    if domain.d0_box is None:
        raise GeometryError("domain has no D_0")
    return PiecewiseLinearPotential(q.a, q.A, q.e0_bound, extended=True, d0_value=1.0)


def lumped_mass(q: PiecewiseLinearPotential, domain: GridDomain, labels) -> np.ndarray:
    """Per-node quadrature of q restricted to the cells with the given labels.

    Entry i is ``2**-dim * sum_c q_c(x_i)`` over the cells c touching node i
    whose label is in ``labels``; q_c is the affine piece of that cell, so at
    interface nodes the two one-sided values are averaged.
    """
    labels = np.asarray(list(labels))
    xyz = domain.coords()
    out = np.zeros(domain.n_nodes)
    for b in range(domain.adjacent.shape[0]):
        lab = domain.adjacent[b]
        take = np.isin(lab, labels)
        if not np.any(take):
            continue
        out[take] += q.piece_values(lab[take], xyz[take])
    return out / domain.adjacent.shape[0]


def coefficient_box(domain: GridDomain, e0: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coefficient bounds (a_max, A_max) of the admissible E_0 box.

    Any potential with |a_j| <= a_max and |A_ji| <= A_max satisfies both
    |||q||| <= E_0 and sup|q| <= E_0 on Omega.
    """
    extent = max(1.0, float(np.max(np.abs(domain.omega_box.corners()))))
    return e0 / 2, e0 / (2 * domain.dim * extent)


def project_to_box(theta: np.ndarray, domain: GridDomain, e0: float) -> np.ndarray:
    """Coefficient-wise clamp of ``[a_1, A_1, ...]`` onto the E_0 box."""
    a_max, A_max = coefficient_box(domain, e0)
    t = np.array(theta, dtype=float).reshape(-1, domain.dim + 1)
    t[:, 0] = np.clip(t[:, 0], -a_max, a_max)
    t[:, 1:] = np.clip(t[:, 1:], -A_max, A_max)
    return t.ravel()


def random_potential(rng: np.random.Generator, domain: GridDomain, e0: float) -> PiecewiseLinearPotential:
    """Coefficients drawn uniformly from the E_0 box."""
    a_max, A_max = coefficient_box(domain, e0)
    n, d = domain.n_subdomains, domain.dim
    return PiecewiseLinearPotential(rng.uniform(-a_max, a_max, n), rng.uniform(-A_max, A_max, (n, d)), e0)
