"""Singular-solution probes, Green's identity checks and three-spheres experiments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cauchy import BoundaryMetric, CauchyPair, CauchySubspace, aperture, pair_bilinear, pair_norm
from .geometry import Chain, GeometryError, GridDomain
from .green import green_columns, loglog_slope, unit_order
from .pde import DiscreteOperator, solve_generation_problem
from .potential import lumped_mass

BETA = math.log(8 / 7) / math.log(4)


# -- S~_U(y, z) ---------------------------------------------------------------------

def unresolved_labels(domain: GridDomain, chain: Chain | None, k: int) -> tuple[int, ...]:
    """Labels of U_k = Omega_0 minus (D_0 and the first k chain subdomains)."""
    resolved = {0}
    if k > 0:
        if chain is None or k > chain.depth:
            raise GeometryError(f"chain depth {0 if chain is None else chain.depth} < k = {k}")
        resolved |= set(chain.order[:k])
    return tuple(j for j in range(1, domain.n_subdomains + 1) if j not in resolved)


def _dq_mass(op1: DiscreteOperator, op2: DiscreteOperator, labels) -> np.ndarray:
    """Lumped (q1 - q2) restricted to the cells of ``labels``, per active row."""
    dom = op1.domain
    diff = lumped_mass(op1.q, dom, labels) - lumped_mass(op2.q, dom, labels)
    return diff[op1.active]


def _check_in_w(op: DiscreteOperator, labels, node: int) -> None:
    dom = op.domain
    touching = set(int(c) for c in dom.adjacent[:, node])
    if touching & set(labels):
        raise GeometryError(f"probe node {node} touches U_k")


def singular_value(op1: DiscreteOperator, op2: DiscreteOperator, y: int, z: int,
                   order_y=None, order_z=None, chain: Chain | None = None, k: int = 0) -> complex:
    """h^dim sum_x (q1 - q2)(x) d^a_y G1(x, y) d^b_z G2(x, z) over U_k."""
    dom = op1.domain
    labels = unresolved_labels(dom, chain, k)
    for node in (y, z):
        _check_in_w(op1, labels, node)
    dq = _dq_mass(op1, op2, labels)
    gy = green_columns(op1, [y], order_y)[:, 0]
    gz = green_columns(op2, [z], order_z)[:, 0]
    return complex(np.sum(dq * gy * gz) * dom.h ** dom.dim)


def singular_field(op1: DiscreteOperator, op2: DiscreteOperator, z: int, order_z=None,
                   chain: Chain | None = None, k: int = 0) -> np.ndarray:
    """S~(., z) on all active nodes, via one extra solve with the symmetric G1."""
    labels = unresolved_labels(op1.domain, chain, k)
    dq = _dq_mass(op1, op2, labels)
    gz = green_columns(op2, [z], order_z)[:, 0]
    return -op1.solve_raw(dq * gz)


def singular_pde_residual(op1: DiscreteOperator, op2: DiscreteOperator, z: int,
                          chain: Chain | None = None, k: int = 0) -> float:
    """Relative residual of (Delta + q1) S~(., z) on rows not touching U_k."""
    labels = unresolved_labels(op1.domain, chain, k)
    S = singular_field(op1, op2, z, None, chain, k)
    res = op1.matrix @ S
    away = ~np.isin(op1.domain.adjacent[:, op1.active], labels).any(axis=0)
    away &= np.arange(op1.n) != op1.row_of[z]
    scale = np.max(np.abs(op1.matrix @ S)) or 1.0
    return float(np.max(np.abs(res[away])) / scale) if np.any(away) else 0.0


# -- Green's identity and the Alessandrini inequality ------------------------------

def volume_term(op1: DiscreteOperator, op2: DiscreteOperator, u1: np.ndarray, u2: np.ndarray) -> complex:
    """h^dim sum (q1 - q2) u1 u2 with the lumped quadrature of the operators."""
    if not np.array_equal(op1.active, op2.active):
        raise ValueError("fields do not conform: operators have different node sets")
    return complex(np.sum((op1.qmass - op2.qmass) * u1 * u2) * op1.h ** op1.dim)


def trace_pair(op: DiscreteOperator, u: np.ndarray) -> CauchyPair:
    return CauchyPair(u[op.impedance_rows], op.normal_derivative(u))


def green_identity_residual(op1: DiscreteOperator, op2: DiscreteOperator, u1: np.ndarray, u2: np.ndarray,
                            metric: BoundaryMetric) -> float:
    """|volume - boundary| relative to the summed magnitude of the boundary terms.

    The boundary side may cancel to round-off (it does exactly when q1 = q2),
    so the scale is sum |f1 g2| + |f2 g1| rather than the value itself.
    """
    if u1.shape != (op1.n,) or u2.shape != (op2.n,):
        raise ValueError("fields do not conform to the operators")
    vol = volume_term(op1, op2, u1, u2)
    p1, p2 = trace_pair(op1, u1), trace_pair(op2, u2)
    bnd = pair_bilinear(metric, p1, p2)
    scale = float(np.sum(metric.mass * (np.abs(p1.f * p2.g) + np.abs(p2.f * p1.g))))
    return abs(vol - bnd) / max(scale, abs(vol), np.finfo(float).tiny)


@dataclass(frozen=True)
class AlessandriniCheck:
    aperture: float
    lhs: np.ndarray
    rhs: np.ndarray
    residuals: np.ndarray

    @property
    def holds(self) -> np.ndarray:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-300

    @property
    def fraction(self) -> float:
        return float(np.mean(self.holds))


def alessandrini_check(op1: DiscreteOperator, op2: DiscreteOperator, metric: BoundaryMetric,
                       S1: CauchySubspace, S2: CauchySubspace, n_pairs: int, rng: np.random.Generator) -> AlessandriniCheck:
    """Sample solution pairs from the two generated spaces and test the inequality."""
    d = aperture(S1, S2)
    phi = np.column_stack([metric.eigenfunction(k) for k in range(metric.size)])
    lhs, rhs, res = [], [], []
    for _ in range(n_pairs):
        c1 = rng.standard_normal(len(S1.modes)) + 1j * rng.standard_normal(len(S1.modes))
        c2 = rng.standard_normal(len(S2.modes)) + 1j * rng.standard_normal(len(S2.modes))
        u1 = solve_generation_problem(op1, phi[:, list(S1.modes)] @ c1).values
        u2 = solve_generation_problem(op2, phi[:, list(S2.modes)] @ c2).values
        vol = volume_term(op1, op2, u1, u2)
        lhs.append(abs(vol))
        rhs.append(d * pair_norm(metric, trace_pair(op1, u1)) * pair_norm(metric, trace_pair(op2, u2)))
        res.append(green_identity_residual(op1, op2, u1, u2, metric))
    return AlessandriniCheck(d, np.array(lhs), np.array(rhs), np.array(res))


# -- three spheres ----------------------------------------------------------------

@dataclass(frozen=True)
class ThreeSpheresResult:
    radii: tuple[float, float, float]
    tau_hat: np.ndarray         # per nondegenerate sample
    skipped: int
    constant_half: float        # max M2 / sqrt(M1 M3)

    @property
    def tau_min(self) -> float:
        return float(np.min(self.tau_hat)) if self.tau_hat.size else float("nan")


def ball_maxima(coords: np.ndarray, values: np.ndarray, center, radii) -> np.ndarray:
    """Node-wise max of |values| over the closed discrete balls; shape (3, n_samples)."""
    dist = np.linalg.norm(coords - np.asarray(center, dtype=float), axis=1)
    vals = np.abs(values if values.ndim == 2 else values[:, None])
    return np.array([vals[dist <= r + 1e-12].max(axis=0) for r in radii])


def three_spheres_from_fields(coords, values, center, radii) -> ThreeSpheresResult:
    r1, r2, r3 = radii
    if not 0 < r1 < r2 < r3:
        raise ValueError("radii must satisfy 0 < r1 < r2 < r3")
    M = ball_maxima(coords, values, center, radii)
    ok = np.all(M > 0, axis=0) & (M[2] > M[0])
    M = M[:, ok]
    tau = np.log(M[2] / M[1]) / np.log(M[2] / M[0])
    const = float(np.max(M[1] / np.sqrt(M[0] * M[2]))) if M.shape[1] else float("nan")
    return ThreeSpheresResult((r1, r2, r3), tau, int(np.count_nonzero(~ok)), const)


def three_spheres_experiment(op: DiscreteOperator, center, radii, n_samples: int,
                             rng: np.random.Generator) -> ThreeSpheresResult:
    """Random impedance data on Sigma, solutions of (Delta + q) v = 0 in Omega."""
    dom = op.domain
    c = np.asarray(center, dtype=float)
    box = dom.omega_box
    if np.any(c - radii[2] <= np.array(box.lo)) or np.any(c + radii[2] >= np.array(box.hi)):
        raise GeometryError("B_{r3}(center) is not inside Omega")
    m = len(op.impedance_rows)
    g = rng.standard_normal((m, n_samples)) + 1j * rng.standard_normal((m, n_samples))
    U = solve_generation_problem(op, g).values
    return three_spheres_from_fields(dom.coords(op.active), U, c, radii)


# -- derivative-scaling report ----------------------------------------------------

@dataclass(frozen=True)
class ProbeReport:
    radii: tuple[float, ...]
    S: tuple[complex, ...]
    first: tuple[complex, ...]
    second: tuple[complex, ...]
    slopes: dict
    r2: dict
    pde_residual: float
    metadata: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["r", "abs_S", "abs_dd_S", "abs_d2d2_S"])
        for r, s, a, b in zip(self.radii, self.S, self.first, self.second):
            w.writerow([f"{r:.10g}", f"{abs(s):.10e}", f"{abs(a):.10e}", f"{abs(b):.10e}"])
        for k, v in self.slopes.items():
            w.writerow([f"# slope_{k}", f"{v:.6f}", f"R2={self.r2[k]:.6f}"])
        w.writerow(["# pde_residual", f"{self.pde_residual:.3e}"])
        for k, v in sorted(self.metadata.items()):
            w.writerow([f"# {k}", f"{v}"])


def smallness_propagation_report(op1: DiscreteOperator, op2: DiscreteOperator, chain: Chain, k: int,
                                 r_steps, eps0: float | None = None) -> ProbeReport:
    """Probe S~_{U_k} at y = z = P_{k+1} - 2 r nu for r = step * h."""
    dom = op1.domain
    if k >= chain.depth:
        raise GeometryError(f"chain depth {chain.depth} does not reach link {k + 1}")
    link = chain.links[k]
    axis = link.axis
    sign = int(round(link.normal[axis]))
    dim, h = dom.dim, dom.h
    o1 = unit_order(dim, (axis,))
    o2 = unit_order(dim, (axis, axis))
    radii, S, first, second = [], [], [], []
    flags = []
    for step in r_steps:
        r = step * h
        offset = [0] * dim
        offset[axis] = -2 * step * sign
        y = dom.shifted(link.center_node, offset)
        radii.append(r)
        S.append(singular_value(op1, op2, y, y, None, None, chain, k))
        first.append(singular_value(op1, op2, y, y, o1, o1, chain, k))
        second.append(singular_value(op1, op2, y, y, o2, o2, chain, k))
        if r < 4 * h:
            flags.append(f"r={r:.4g}_below_4h")
        if r > dom.r0 / 8:
            flags.append(f"r={r:.4g}_above_2r1")
    S_abs = np.abs(S)
    if np.all(S_abs == 0):
        slopes = {"first_ratio": float("nan"), "second_ratio": float("nan")}
        r2 = {"first_ratio": float("nan"), "second_ratio": float("nan")}
    else:
        s1, q1 = loglog_slope(radii, np.abs(first) / S_abs)
        s2, q2 = loglog_slope(radii, np.abs(second) / S_abs)
        slopes = {"first_ratio": s1, "second_ratio": s2}
        r2 = {"first_ratio": q1, "second_ratio": q2}
    z_res = singular_pde_residual(op1, op2, y, chain, k)
    meta = {"beta": BETA, "k": k, "gamma": 2 - dim / 2}
    if eps0 is not None:
        meta["eps0"] = eps0
    return ProbeReport(tuple(radii), tuple(S), tuple(first), tuple(second), slopes, r2, z_res, meta, tuple(flags))
