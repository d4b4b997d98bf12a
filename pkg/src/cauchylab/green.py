"""Green's functions of the mixed problem on Omega_0 and their iterated kernels.

``G(x, y)`` solves ``(Delta + q) G(., y) = -delta_y`` with the operator's
boundary conditions.  Columns for source derivatives are obtained by solving
against difference-quotient combinations of deltas, so they are exact
derivatives of the discrete inverse and need no post-hoc differencing.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, GridDomain
from .pde import BoundaryConditions, ComplexField, DiscreteOperator, assemble
from .potential import PiecewiseLinearPotential


class AsymptoticsError(ValueError):
    pass


def sphere_area(n: int) -> float:
    """Area of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def fundamental_solution(dim: int, x) -> np.ndarray:
    """Fundamental solution of -Delta evaluated at offsets ``x`` (last axis = dim)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"offset must have {dim} components")
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0):
        raise ValueError("fundamental solution is singular at x = 0")
    if dim == 2:
        return -np.log(r) / (2 * math.pi)
    return r ** (2 - dim) / ((dim - 2) * sphere_area(dim))


# -- difference stencils in the source variable -------------------------------------

_STENCIL_1D = {
    0: {0: 1.0},
    1: {-1: -0.5, 1: 0.5},
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
}


def derivative_stencil(order, h: float) -> list[tuple[tuple[int, ...], float]]:
    """Offsets (in lattice units) and weights of the centered derivative of multi-index ``order``."""
    order = tuple(int(o) for o in order)
    if any(o < 0 or o > 2 for o in order) or sum(order) > 2:
        raise ValueError(f"unsupported derivative order {order}")
    per_axis = [_STENCIL_1D[o].items() for o in order]
    out = []
    for combo in itertools.product(*per_axis):
        offs = tuple(c[0] for c in combo)
        w = float(np.prod([c[1] for c in combo])) / h ** sum(order)
        out.append((offs, w))
    return out


def unit_order(dim: int, axes=()) -> tuple[int, ...]:
    """Multi-index with one entry per listed axis, e.g. unit_order(3, (2, 2)) = (0, 0, 2)."""
    o = [0] * dim
    for a in axes:
        o[a] += 1
    return tuple(o)


@dataclass(frozen=True, eq=False)
class GreenColumn:
    source: int
    order: tuple[int, ...]
    values: ComplexField


def _source_rhs(op: DiscreteOperator, y: int, order) -> np.ndarray:
    dom = op.domain
    rhs = np.zeros(op.n, dtype=complex)
    for offs, w in derivative_stencil(order, dom.h):
        try:
            node = dom.shifted(y, offs)
        except GeometryError:
            raise GeometryError(f"source {y} too close to the lattice edge for order {tuple(order)}") from None
        row = op.row_of[node]
        if row < 0 or op.weights[row] < 1.0:
            raise GeometryError(f"source {y} too close to the boundary for order {tuple(order)}")
        rhs[row] -= w / dom.h ** dom.dim
    return rhs


def source_rhs(op: DiscreteOperator, ys, order) -> np.ndarray:
    """Right-hand sides (one column per source) for -d^order delta_y."""
    return np.column_stack([_source_rhs(op, int(y), order) for y in np.atleast_1d(ys)])


def green_columns(op: DiscreteOperator, ys, order=None) -> np.ndarray:
    """Values of d_y^order G(., y) on the active nodes, one column per source."""
    order = order if order is not None else (0,) * op.dim
    return op.solve_raw(source_rhs(op, ys, order))


def green_column(op: DiscreteOperator, y: int, order=None) -> GreenColumn:
    order = tuple(order) if order is not None else (0,) * op.dim
    vals = green_columns(op, [y], order)[:, 0]
    return GreenColumn(int(y), order, op.field(vals))


def green_operator(domain: GridDomain, q: PiecewiseLinearPotential, tau: float = 1.0) -> DiscreteOperator:
    """Mixed-problem operator on Omega_0 for the extended potential."""
    return assemble(domain, q, BoundaryConditions(region="omega0", tau=tau))


def laplace_operator(domain: GridDomain, tau: float = 1.0) -> DiscreteOperator:
    zero = PiecewiseLinearPotential(np.zeros(domain.n_subdomains), np.zeros((domain.n_subdomains, domain.dim)),
                                    extended=True, d0_value=0.0)
    return green_operator(domain, zero, tau)


def gamma_column(op: DiscreteOperator, y: int, order=None, nodes=None) -> np.ndarray:
    """d_y^order Gamma(x - y) with the same difference stencil as the Green column.

    Evaluated at ``nodes`` (default: the active nodes); entries where a
    stencil point coincides with x are NaN.
    """
    dom = op.domain
    order = tuple(order) if order is not None else (0,) * dom.dim
    nodes = op.active if nodes is None else np.asarray(nodes)
    x = dom.coords(nodes)
    out = np.zeros(len(nodes))
    for offs, w in derivative_stencil(order, dom.h):
        ys = dom.coords(dom.shifted(y, offs)).reshape(-1)
        d = x - ys
        bad = np.all(d == 0, axis=1)
        d[bad] = 1.0
        val = fundamental_solution(dom.dim, d)
        val[bad] = np.nan
        out += w * val
    return out


# -- iterated kernels -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KernelStack:
    """Layers R_0 = G_0, R_1..R_J, R_{J+1} of the iterated-kernel decomposition."""

    J: int
    source: int
    layers: tuple[np.ndarray, ...]
    nodes: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return np.sum(self.layers, axis=0)


def kernel_depth(dim: int) -> int:
    return (dim - 1) // 2


def kernel_stack(domain: GridDomain, q: PiecewiseLinearPotential, y: int, order=None,
                 op_q: DiscreteOperator | None = None, op_0: DiscreteOperator | None = None) -> KernelStack:
    """Iterated kernels: R_0 = G_0, Delta R_j = -q R_{j-1}, (Delta + q) R_{J+1} = -q R_J.

    All layers share the mixed boundary conditions, so their sum reproduces
    the direct Green column exactly (up to solver tolerance).
    """
    op_q = op_q or green_operator(domain, q)
    op_0 = op_0 or laplace_operator(domain, op_q.bc.tau)
    if not np.array_equal(op_q.active, op_0.active):
        raise ValueError("operators must share the node set")
    order = tuple(order) if order is not None else (0,) * domain.dim
    J = kernel_depth(domain.dim)
    # pointwise q on active nodes, consistent with the lumped mass rows
    qnode = op_q.qmass / op_q.weights
    w = op_q.weights
    layers = [op_0.solve_raw(_source_rhs(op_0, y, order))]
    for _ in range(J):
        layers.append(op_0.solve_raw(w * (-qnode * layers[-1])))
    layers.append(op_q.solve_raw(w * (-qnode * layers[-1])))
    return KernelStack(J, int(y), tuple(layers), op_q.active)


# -- asymptotics ------------------------------------------------------------------

def loglog_slope(r, values) -> tuple[float, float]:
    """Least-squares slope of log(values) against log(r) and its R^2."""
    lr = np.log(np.asarray(r, dtype=float))
    lv = np.log(np.asarray(values, dtype=float))
    if lr.size < 2:
        return float("nan"), float("nan")
    A = np.column_stack([lr, np.ones_like(lr)])
    coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
    fit = A @ coef
    ss_res = float(np.sum((lv - fit) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def envelope(kind: str, dim: int, r):
    """Predicted growth of |G - Gamma| and its y-derivatives as |x - y| = r -> 0."""
    r = np.asarray(r, dtype=float)
    if kind == "value":
        if dim == 3:
            return np.ones_like(r)
        if dim == 4:
            return np.abs(np.log(r)) + 1
        return r ** (4 - dim) if dim > 4 else np.abs(np.log(r)) + 1
    if kind == "gradient":
        if dim == 3:
            return np.abs(np.log(r)) + 1
        return r ** (3 - dim)
    if kind == "hessian":
        return r ** (2 - dim)
    raise ValueError(kind)


@dataclass(frozen=True)
class AsymptoticsReport:
    mode: str
    radii: tuple[float, ...]
    value: tuple[float, ...]
    relative: tuple[float, ...]
    gradient: tuple[float, ...]
    hessian: tuple[float, ...]
    slopes: dict
    envelope_sup: dict
    envelope_drift: dict
    flags: tuple[str, ...] = ()

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["r", "abs_G_minus_Gamma", "rel_to_Gamma", "abs_grad", "abs_hess",
                    "env_value", "env_grad", "env_hess"])
        dim = 3 if "dim2" not in self.flags else 2
        for i, r in enumerate(self.radii):
            w.writerow([f"{r:.10g}", f"{self.value[i]:.10e}", f"{self.relative[i]:.10e}",
                        f"{self.gradient[i]:.10e}", f"{self.hessian[i]:.10e}",
                        f"{float(envelope('value', dim, r)):.10e}",
                        f"{float(envelope('gradient', dim, r)):.10e}",
                        f"{float(envelope('hessian', dim, r)):.10e}"])
        for k, v in self.slopes.items():
            w.writerow([f"# slope_{k}", f"{v:.6f}"])
        for k, v in self.envelope_drift.items():
            w.writerow([f"# drift_{k}", f"{v:.6f}"])


def _check_radii(radii, h: float, lo_h: float = 4.0) -> list[str]:
    flags = []
    if len(radii) < 4:
        raise AsymptoticsError(f"need at least 4 radii, got {len(radii)}")
    if min(radii) < lo_h * h - 1e-12:
        flags.append("radius_below_4h")
    return flags


def _hessian_orders(dim: int) -> list[tuple[int, ...]]:
    return [unit_order(dim, (a, b)) for a in range(dim) for b in range(a, dim)]


def asymptotics_report(domain: GridDomain, q: PiecewiseLinearPotential, y: int, direction,
                       radii_steps, mode: str = "interior", op: DiscreteOperator | None = None,
                       ball_radius: float | None = None) -> AsymptoticsReport:
    """Compare d^alpha_y (G - Gamma) with the predicted envelopes along a ray.

    mode "interior": the source ``y`` is fixed and the target is
        ``x = y + r * direction`` for the radii ``r = k * h``, k in ``radii_steps``.
    mode "interface": ``y`` is the interface point Q, ``direction`` the unit
        normal into the next subdomain; the source is ``Q - r * direction`` and
        the targets are the nodes of the half ball of radius ``ball_radius``
        around Q on the far side (interface included).  Quantities are the
        sup over those targets.
    """
    op = op or green_operator(domain, q)
    dim, h = domain.dim, domain.h
    direction = np.asarray(direction, dtype=int)
    radii = [k * h for k in radii_steps]
    flags = _check_radii(radii, h)
    if dim == 2:
        flags.append("dim2")
    value, rel, grad, hess = [], [], [], []
    zero = (0,) * dim
    for k in radii_steps:
        if mode == "interior":
            src = y
            targets = np.array([domain.shifted(y, k * direction)])
        elif mode == "interface":
            src = domain.shifted(y, -k * direction)
            xq = domain.coords(y).reshape(-1)
            xyz = domain.coords(op.active)
            side = (xyz - xq) @ direction > 1e-12
            near = np.linalg.norm(xyz - xq, axis=1) <= (ball_radius or domain.r0 / 16) + 1e-12
            targets = op.active[side & near]
        else:
            raise ValueError(f"unknown mode {mode!r}")
        rows = op.row_of[targets]
        g0 = green_columns(op, [src], zero)[rows, 0]
        gam = gamma_column(op, src, zero, targets)
        value.append(float(np.max(np.abs(g0 - gam))))
        rel.append(float(np.max(np.abs(g0 - gam) / np.abs(gam))))
        gsq = np.zeros(len(targets))
        for a in range(dim):
            o = unit_order(dim, (a,))
            d = green_columns(op, [src], o)[rows, 0] - gamma_column(op, src, o, targets)
            gsq += np.abs(d) ** 2
        grad.append(float(np.max(np.sqrt(gsq))))
        hsq = np.zeros(len(targets))
        for o in _hessian_orders(dim):
            d = green_columns(op, [src], o)[rows, 0] - gamma_column(op, src, o, targets)
            mult = 1.0 if max(o) == 2 else 2.0
            hsq += mult * np.abs(d) ** 2
        hess.append(float(np.max(np.sqrt(hsq))))
    r = np.array(radii)
    if not np.all(np.isfinite(hess)):
        flags.append("stencil_hits_target")
    slopes = {
        "value": loglog_slope(r, value)[0],
        "relative": loglog_slope(r, rel)[0],
        "gradient": loglog_slope(r, grad)[0],
        "hessian": loglog_slope(r, hess)[0],
    }
    env_sup, drift = {}, {}
    for name, vals, kind in (("value", value, "value"), ("gradient", grad, "gradient"), ("hessian", hess, "hessian")):
        ratio = np.asarray(vals) / envelope(kind, dim, r)
        env_sup[name] = float(np.max(ratio))
        drift[name] = float(np.max(ratio) / np.min(ratio))
    return AsymptoticsReport(mode, tuple(radii), tuple(value), tuple(rel), tuple(grad), tuple(hess),
                             slopes, env_sup, drift, tuple(flags))
