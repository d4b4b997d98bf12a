"""Finite-difference operators for Delta v + q v = f with mixed conditions.

Rows are the finite-volume form of the centered (2*dim+1)-point stencil:
each row is multiplied by the fraction ``w`` of its dual cell inside the
region, so half-cell rows on an impedance face are exactly the ghost-node
elimination of ``(v_ghost - v_in) / (2h) + i tau v = 0`` scaled by 1/2.  The
resulting matrix is complex symmetric, which makes discrete reciprocity exact.

Conventions: ``A v = w * f`` for a source field ``f``; the discrete delta at
a node y is ``e_y / (w_y h**dim)``, so ``A G(., y) = -e_y / h**dim``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import GridDomain, NodeClass
from .potential import PiecewiseLinearPotential, lumped_mass

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundaryConditions:
    """Which problem to assemble.

    region : "omega0"  impedance on Sigma_0, Dirichlet on the rest of the
             boundary of Omega_0 (the Green's function problem);
             "omega"   impedance on Sigma, Dirichlet on the rest of the
             boundary of Omega (the Cauchy data generator).
    tau : coefficient of the impedance term (1 by default).
    impedance : if False the impedance face is Dirichlet too (diagnostics).
    """

    region: str = "omega0"
    tau: float = 1.0
    impedance: bool = True


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    domain: GridDomain
    q: PiecewiseLinearPotential
    bc: BoundaryConditions
    matrix: sp.csc_matrix
    active: np.ndarray          # node index per row
    row_of: np.ndarray          # row per node, -1 if inactive
    weights: np.ndarray         # dual-cell fraction per row
    qmass: np.ndarray           # lumped q per row
    impedance_rows: np.ndarray  # rows carrying the impedance term
    edges: tuple                # (node_i, node_j, weight) of every stencil edge in the region
    _lu: object = field(repr=False, default=None)

    @property
    def h(self) -> float:
        return self.domain.h

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n(self) -> int:
        return self.active.shape[0]

    @property
    def lu(self):
        if self._lu is None:
            try:
                lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:  # singular factor
                raise SolverError(f"factorization failed: {exc}") from exc
            object.__setattr__(self, "_lu", lu)
        return self._lu

    def solve_raw(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b`` (b may hold several right-hand sides as columns)."""
        b = np.asarray(b, dtype=complex)
        x = self.lu.solve(b)
        bnorm = np.linalg.norm(b, axis=0)
        for _ in range(3):
            r = b - self.matrix @ x
            rel = np.linalg.norm(r, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
            if np.all(rel <= RESIDUAL_TOL):
                break
            x = x + self.lu.solve(r)
        else:
            r = b - self.matrix @ x
            rel = np.linalg.norm(r, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
            if np.any(rel > RESIDUAL_TOL):
                raise SolverError(f"relative residual {np.max(rel):.2e} above {RESIDUAL_TOL}")
        return x

    def solve(self, f) -> "ComplexField":
        """Solve ``Delta v + q v = f`` with the operator's boundary conditions."""
        vals = f.values if isinstance(f, ComplexField) else np.asarray(f)
        if vals.shape[0] != self.n:
            raise ValueError("source does not conform to the operator's node set")
        w = self.weights if vals.ndim == 1 else self.weights[:, None]
        return ComplexField(self.solve_raw(w * vals), self.active, self.domain)

    def natural_apply(self, u: np.ndarray) -> np.ndarray:
        """Apply the operator without its impedance term (no-flux boundary rows)."""
        out = self.matrix @ u
        if self.bc.impedance:
            iu = u[self.impedance_rows] if u.ndim == 1 else u[self.impedance_rows, :]
            out[self.impedance_rows] += 1j * self.bc.tau / self.h * iu
        return out

    def normal_derivative(self, u: np.ndarray) -> np.ndarray:
        """Discrete outward normal derivative on the impedance rows.

        This is the flux that closes the half-cell balance of each boundary
        row (second-order ghost-node difference); it is the quantity for which
        summation by parts holds exactly.
        """
        return -self.h * self.natural_apply(u)[self.impedance_rows]

    def field(self, values) -> "ComplexField":
        return ComplexField(np.asarray(values, dtype=complex), self.active, self.domain)


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Complex values on a set of nodes of a domain."""

    values: np.ndarray
    nodes: np.ndarray
    domain: GridDomain

    def full(self) -> np.ndarray:
        out = np.zeros((self.domain.n_nodes,) + self.values.shape[1:], dtype=complex)
        out[self.nodes] = self.values
        return out

    def at(self, node) -> complex:
        return self.full()[node]

    def dump(self, stream) -> None:
        """Text dump, one active node per line: index, real, imag."""
        for i, v in zip(self.nodes, self.values):
            stream.write(f"{int(i)} {v.real:.17g} {v.imag:.17g}\n")


def _edges(domain: GridDomain, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stencil edges (i, i + e_a) with weight = fraction of touching cells in region."""
    dim = domain.dim
    inside = np.isin(domain.adjacent, list(labels))
    all_i, all_j, all_c = [], [], []
    for a in range(dim):
        plus = [b for b in range(2 ** dim) if (b >> a) & 1]
        c = inside[plus].mean(axis=0)
        multi = domain.multi_index(np.arange(domain.n_nodes))
        ok = (c > 0) & (multi[:, a] < domain.shape[a] - 1)
        i = np.flatnonzero(ok)
        step = int(np.prod(domain.shape[a + 1:]))
        all_i.append(i)
        all_j.append(i + step)
        all_c.append(c[ok])
    return np.concatenate(all_i), np.concatenate(all_j), np.concatenate(all_c)


def assemble(domain: GridDomain, q: PiecewiseLinearPotential, bc: BoundaryConditions | None = None) -> DiscreteOperator:
    """Assemble the complex-symmetric system for ``Delta v + q v = f``."""
    bc = bc or BoundaryConditions()
    labels = domain.region_labels(bc.region)
    cls = domain.node_class
    frac = domain.cell_fraction(labels)
    if bc.region == "omega0":
        if not q.extended:
            raise ValueError("the Omega_0 problem needs the extended potential")
        active_mask = np.isin(cls, [NodeClass.INTERIOR, NodeClass.ACCESSIBLE])
        imp_mask = cls == NodeClass.IMPEDANCE
    else:
        active_mask = (frac == 1.0) & (domain.omega_label >= 1) & (cls != NodeClass.ACCESSIBLE)
        imp_mask = cls == NodeClass.ACCESSIBLE
    if bc.impedance:
        active_mask = active_mask | imp_mask
    else:
        imp_mask = np.zeros_like(imp_mask)
    active = np.flatnonzero(active_mask)
    row_of = np.full(domain.n_nodes, -1, dtype=np.int64)
    row_of[active] = np.arange(active.shape[0])

    h2 = domain.h ** 2
    ei, ej, ec = _edges(domain, labels)
    ri, rj = row_of[ei], row_of[ej]
    diag = np.zeros(active.shape[0], dtype=complex)
    np.add.at(diag, ri[ri >= 0], -ec[ri >= 0] / h2)
    np.add.at(diag, rj[rj >= 0], -ec[rj >= 0] / h2)
    both = (ri >= 0) & (rj >= 0)
    qm_all = lumped_mass(q, domain, labels)
    qmass = qm_all[active]
    diag += qmass
    imp_rows = row_of[np.flatnonzero(imp_mask)]
    diag[imp_rows] -= 1j * bc.tau / domain.h

    rows = np.concatenate([ri[both], rj[both], np.arange(active.shape[0])])
    cols = np.concatenate([rj[both], ri[both], np.arange(active.shape[0])])
    vals = np.concatenate([ec[both] / h2, ec[both] / h2, diag]).astype(complex)
    n = active.shape[0]
    matrix = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    matrix.sum_duplicates()
    for arr in (active, row_of, imp_rows):
        arr.setflags(write=False)
    return DiscreteOperator(
        domain=domain, q=q, bc=bc, matrix=matrix, active=active, row_of=row_of,
        weights=frac[active], qmass=qmass, impedance_rows=imp_rows,
        edges=(ei, ej, ec),
    )


def solve(op: DiscreteOperator, f) -> ComplexField:
    return op.solve(f)


def generation_operator(domain: GridDomain, q: PiecewiseLinearPotential, tau: float = 1.0) -> DiscreteOperator:
    """Operator of the impedance problem on Omega used to generate Cauchy data."""
    return assemble(domain, q, BoundaryConditions(region="omega", tau=tau))


def solve_generation_problem(op: DiscreteOperator, g: np.ndarray) -> ComplexField:
    """Solve Delta u + q u = 0 in Omega, u = 0 off Sigma, du/dnu + i tau u = g on Sigma.

    ``g`` is given on the Sigma nodes in the order of ``op.impedance_rows``;
    a 2-D ``g`` solves one problem per column.
    """
    if op.bc.region != "omega":
        raise ValueError("generation problems live on Omega")
    g = np.asarray(g, dtype=complex)
    rhs = np.zeros((op.n,) + g.shape[1:], dtype=complex)
    rhs[op.impedance_rows] = -g / op.h
    return ComplexField(op.solve_raw(rhs), op.active, op.domain)


# -- energy bookkeeping for the well-posedness identities ---------------------------

def gradient_energy(op: DiscreteOperator, v: np.ndarray) -> float:
    """sum |grad v|^2 h^dim over the stencil edges (Dirichlet nodes carry 0)."""
    ei, ej, ec = op.edges
    full = np.zeros(op.domain.n_nodes, dtype=complex)
    full[op.active] = v
    d = full[ej] - full[ei]
    return float(np.sum(ec * np.abs(d) ** 2) * op.h ** (op.dim - 2))


def energy_identities(op: DiscreteOperator, f: np.ndarray, v: np.ndarray) -> dict:
    """Both sides of the imaginary-part and real-part energy identities.

    With ``<f, v> = sum w f conj(v) h^dim``:
        Im <f, v> = -tau sum_{Sigma_0} |v|^2 h^(dim-1)
        sum |grad v|^2 = -Re <f, v> + sum q |v|^2
    """
    hd = op.h ** op.dim
    pair = np.sum(op.weights * f * np.conj(v)) * hd
    imp = op.impedance_rows
    boundary = float(np.sum(np.abs(v[imp]) ** 2) * op.h ** (op.dim - 1))
    potential = float(np.sum(op.qmass * np.abs(v) ** 2) * hd)
    grad = gradient_energy(op, v)
    return {
        "im_lhs": float(pair.imag),
        "im_rhs": -op.bc.tau * boundary,
        "re_lhs": grad,
        "re_rhs": float(-pair.real + potential),
    }


def operator_norm_estimate(op: DiscreteOperator, iters: int = 30, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.n) + 0j
    x /= np.linalg.norm(x)
    val = 0.0
    for _ in range(iters):
        y = op.matrix.conj().T @ (op.matrix @ x)
        val = np.linalg.norm(y)
        x = y / val
    return float(np.sqrt(val))


def smallest_singular_value(op: DiscreteOperator, iters: int = 30, seed: int = 0) -> float:
    """Inverse power iteration on A^H A using the stored factorization."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.n) + 0j
    x /= np.linalg.norm(x)
    val = 1.0
    for _ in range(iters):
        y = op.lu.solve(x)
        y = op.lu.solve(y, trans="H")
        val = np.linalg.norm(y)
        x = y / val
    return float(1.0 / np.sqrt(val))


def dirichlet_near_eigen(domain: GridDomain, q: PiecewiseLinearPotential, rel_tol: float = 1e-8) -> dict:
    """Diagnostic: is 0 (nearly) a Dirichlet eigenvalue of Delta + q on Omega?"""
    op = assemble(domain, q, BoundaryConditions(region="omega", impedance=False))
    smin = smallest_singular_value(op)
    anorm = operator_norm_estimate(op)
    return {"sigma_min": smin, "norm": anorm, "near_eigenvalue": smin < rel_tol * anorm}
