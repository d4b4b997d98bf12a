"""Empirical Lipschitz-stability experiments over the piecewise-linear class.

* ``Modulus``: the logarithmic modulus of continuity and its compositions.
* ``stability_sweep``: random potential pairs, sup-norm error E against the
  aperture eps0 of their Cauchy data spaces.
* ``boundary_stability_probe``: recovers the jump of q1 - q2 at P_1 and its
  normal derivative from the blow-up of source-derivative singular solutions.
* ``reconstruct``: projected gradient descent (Landweber type) with
  adjoint-state gradients.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cauchy import BoundaryMetric, aperture, build_metric, stabilized_aperture, subspace_from_pairs
from .geometry import Chain, GridDomain
from .green import unit_order
from .pde import DiscreteOperator, generation_operator, solve_generation_problem
from .potential import (
    PiecewiseLinearPotential, coeff_norm, coefficient_box, lumped_mass, project_to_box,
    random_potential, sup_norm,
)
from .probes import singular_value

log = logging.getLogger(__name__)


# -- modulus of continuity --------------------------------------------------------

@dataclass(frozen=True)
class Modulus:
    """omega_b composed ``j`` times; ``j = 0`` is the power t**alpha."""

    b: float
    j: int = 1
    alpha: float = 0.5

    def __post_init__(self):
        if self.b <= 0:
            raise ValueError("b must be positive")
        if self.j < 0:
            raise ValueError("composition order must be >= 0")
        if self.j == 0 and not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def omega(b: float, t):
    """2^b e^-2 |log t|^-b on (0, e^-2), e^-2 beyond."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("modulus is defined for t > 0 only")
    small = t < math.exp(-2)
    safe = np.where(small, t, 0.5)
    return np.where(small, 2.0 ** b * math.exp(-2) * np.abs(np.log(safe)) ** (-b), math.exp(-2))


def modulus_eval(mod: Modulus, t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("modulus is defined for t > 0 only")
    if mod.j == 0:
        return t ** mod.alpha
    out = t
    for _ in range(mod.j):
        out = omega(mod.b, out)
    return out


# -- stability sweep ------------------------------------------------------------------

def fixture_hash(domain: GridDomain) -> str:
    d = hashlib.sha256()
    d.update(np.asarray(domain.shape, dtype=np.int64).tobytes())
    d.update(np.asarray(domain.lo, dtype=np.float64).tobytes())
    d.update(np.float64(domain.h).tobytes())
    d.update(domain.cell_label.astype(np.int64).tobytes())
    d.update(domain.node_class.astype(np.int64).tobytes())
    return d.hexdigest()[:16]


@dataclass(frozen=True)
class SweepRecord:
    index: int
    seed: int
    kind: str                 # "random", "identical", "scaling"
    theta1: tuple[float, ...]
    theta2: tuple[float, ...]
    E: float
    eps0: float
    eps0_double: float
    drift: float
    ratio: float | None
    m: int
    h: float
    fixture: str
    flags: tuple[str, ...] = ()

    @property
    def excluded(self) -> bool:
        return "m_not_stabilized" in self.flags


@dataclass
class SweepResult:
    records: list[SweepRecord]
    summary: dict

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["index", "seed", "kind", "E", "eps0", "eps0_2m", "drift", "ratio", "m", "h",
                    "fixture", "flags", "theta1", "theta2"])
        for r in self.records:
            w.writerow([r.index, r.seed, r.kind, f"{r.E:.17g}", f"{r.eps0:.17g}", f"{r.eps0_double:.17g}",
                        f"{r.drift:.17g}", "" if r.ratio is None else f"{r.ratio:.17g}", r.m, f"{r.h:.17g}",
                        r.fixture, ";".join(r.flags),
                        " ".join(f"{v:.17g}" for v in r.theta1), " ".join(f"{v:.17g}" for v in r.theta2)])

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"


def _pair_record(index, seed, kind, domain, metric, q1, q2, m, fx, tol_zero) -> SweepRecord:
    op1 = generation_operator(domain, q1)
    op2 = generation_operator(domain, q2)
    rep = stabilized_aperture(op1, op2, metric, m)
    E = sup_norm(q1 - q2, domain)
    ratio = E / rep.d if rep.d > tol_zero else None
    flags = list(rep.flags)
    if (E == 0) != (rep.d <= tol_zero):
        flags.append("injectivity_violation")
    return SweepRecord(index, seed, kind, tuple(q1.theta()), tuple(q2.theta()), E, rep.d, rep.d_double,
                       rep.drift, ratio, m, domain.h, fx, tuple(flags))


def draw_pair(rng: np.random.Generator, domain: GridDomain, e0: float,
              s_range=(1e-3, 1.0)) -> tuple[PiecewiseLinearPotential, PiecewiseLinearPotential]:
    """q1 uniform in the E0 box; q2 on the segment towards a second uniform draw.

    The fraction s is log-uniform so that E covers several decades; both
    potentials stay in the (convex) box.
    """
    q1 = random_potential(rng, domain, e0)
    u = random_potential(rng, domain, e0)
    s = math.exp(rng.uniform(math.log(s_range[0]), math.log(s_range[1])))
    q2 = PiecewiseLinearPotential(q1.a + s * (u.a - q1.a), q1.A + s * (u.A - q1.A), e0)
    return q1, q2


def stability_sweep(domain: GridDomain, n_samples: int, seed: int, m: int, e0: float = 10.0,
                    fixture: str | None = None, tol_zero: float = 1e-10,
                    scaling_deltas=(1e-2, 1e-3)) -> SweepResult:
    """Random potential pairs plus an identical pair and a scaling pair.

    Per sample i the generator is seeded with (seed, i), so records do not
    depend on how many samples run before them.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    metric = build_metric(domain)
    fx = fixture or fixture_hash(domain)
    records: list[SweepRecord] = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        q1, q2 = draw_pair(rng, domain, e0)
        records.append(_pair_record(i, seed, "random", domain, metric, q1, q2, m, fx, tol_zero))
    rng = np.random.default_rng([seed, n_samples])
    q = random_potential(rng, domain, e0)
    records.append(_pair_record(n_samples, seed, "identical", domain, metric, q, q, m, fx, tol_zero))
    one = PiecewiseLinearPotential(np.ones(q.n_sub), np.zeros_like(q.A))
    for j, delta in enumerate(scaling_deltas):
        records.append(_pair_record(n_samples + 1 + j, seed, "scaling", domain, metric, q,
                                    q + one.scaled(delta), m, fx, tol_zero))
    return SweepResult(records, summarize(records, domain, m, n_samples, seed, fx))


def summarize(records, domain, m, n_samples, seed, fx) -> dict:
    rnd = [r for r in records if r.kind == "random"]
    used = [r for r in rnd if not r.excluded]
    ratios = np.array([r.ratio for r in used if r.ratio is not None])
    flags = sorted({f for r in records for f in r.flags})
    if domain.dim == 2:
        flags.append("out_of_paper_regime")
    flags.append("metric_relative")
    if len(used) >= 3:
        rho = float(stats.spearmanr([r.E for r in used], [r.eps0 for r in used]).statistic)
    else:
        rho = float("nan")
    ident = [r for r in records if r.kind == "identical"]
    scaling = [r for r in records if r.kind == "scaling"]
    out = {
        "fixture": fx,
        "h": domain.h,
        "m": m,
        "n_samples": n_samples,
        "seed": seed,
        "n_used": len(used),
        "n_excluded": len(rnd) - len(used),
        "max_ratio": float(ratios.max()) if ratios.size else None,
        "median_ratio": float(np.median(ratios)) if ratios.size else None,
        "min_ratio": float(ratios.min()) if ratios.size else None,
        "spearman": rho,
        "identical_eps0": ident[0].eps0 if ident else None,
        "injectivity_ok": not any("injectivity_violation" in r.flags for r in records),
        "flags": flags,
    }
    if len(scaling) == 2 and all(r.ratio for r in scaling):
        out["scaling_ratio_drift"] = max(scaling[0].ratio, scaling[1].ratio) / min(scaling[0].ratio, scaling[1].ratio)
    return out


# -- boundary stability probe -------------------------------------------------------

@dataclass(frozen=True)
class BoundaryProbeReport:
    radii: tuple[float, ...]
    first: tuple[complex, ...]
    second: tuple[complex, ...]
    jump: float
    normal_slope: float
    jump_from_second: float
    r2_first: float
    r2_second: float
    truth_jump: float | None = None
    truth_slope: float | None = None
    flags: tuple[str, ...] = ()

    @property
    def jump_error(self) -> float | None:
        if self.truth_jump is None:
            return None
        return abs(self.jump - self.truth_jump) / max(abs(self.truth_jump), 1e-300)

    @property
    def slope_error(self) -> float | None:
        if self.truth_slope is None:
            return None
        return abs(self.normal_slope - self.truth_slope) / max(abs(self.truth_slope), 1e-300)


def _linfit(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    ss_res = float(np.sum((y - X @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return coef, (1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0


def boundary_stability_probe(op1: DiscreteOperator, op2: DiscreteOperator, chain: Chain, r_steps,
                             r2_min: float = 0.9) -> BoundaryProbeReport:
    """Normal-derivative probes of S~_{U_0} at y = z = P_1 - r nu_1 (inside D_0).

    Near a flat interface with (q1 - q2) = c + b x_nu on the far side, the
    leading behaviour of the probes is

        d_yn d_zn S   ~ c / (32 pi r) + b (log(L/r) - 1) / (32 pi)
        d2_yn d2_zn S ~ c / (64 pi r^3) + b / (128 pi r^2)

    so c is read off the intercept of r * first = C0 + C1 r, and b off the
    linear coefficient of r^3 * second = A + B r + C r^2.
    """
    if len(r_steps) < 3:
        raise ValueError("boundary probe needs at least three radii for the quadratic fit")
    dom = op1.domain
    link = chain.links[0]
    axis = link.axis
    sign = int(round(link.normal[axis]))
    dim, h = dom.dim, dom.h
    o1 = unit_order(dim, (axis,))
    o2 = unit_order(dim, (axis, axis))
    radii, first, second = [], [], []
    flags = []
    for step in r_steps:
        offset = [0] * dim
        offset[axis] = -step * sign
        y = dom.shifted(link.center_node, offset)
        radii.append(step * h)
        first.append(singular_value(op1, op2, y, y, o1, o1, chain, 0))
        second.append(singular_value(op1, op2, y, y, o2, o2, chain, 0))
        if step < 4:
            flags.append(f"r={step}h_below_4h")
    r = np.array(radii)
    p1 = np.real(np.array(first))
    p2 = np.real(np.array(second))
    c1, r2a = _linfit(np.column_stack([np.ones_like(r), r]), r * p1)
    c2, r2b = _linfit(np.column_stack([np.ones_like(r), r, r ** 2]), r ** 3 * p2)
    jump = 32 * math.pi * c1[0]
    slope = 128 * math.pi * c2[1]
    jump2 = 64 * math.pi * c2[0]
    if min(r2a, r2b) < r2_min:
        flags.append("low_confidence")
    # synthetic truth from the D_1 pieces at P_1
    j1 = chain.order[0]
    P = np.array(link.center)
    nu = np.array(link.normal)
    dq = op1.q - op2.q
    tj = float(dq.a[j1 - 1] + dq.A[j1 - 1] @ P)
    ts = float(dq.A[j1 - 1] @ nu)
    return BoundaryProbeReport(tuple(radii), tuple(first), tuple(second), jump, slope, jump2,
                               r2a, r2b, tj, ts, tuple(flags))


# -- reconstruction ---------------------------------------------------------------

class ReconstructionDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class ForwardModel:
    """Impedance-generated Sigma traces as a function of the coefficients.

    Residuals are measured in the weighted boundary metric: since the
    recorded normal derivative is g = g_imp - i tau f, the misfit of a pair
    reduces to a quadratic form in the trace misfit alone.
    """

    domain: GridDomain
    metric: BoundaryMetric
    modes: tuple[int, ...]
    tau: float = 1.0
    _basis_mass: np.ndarray = field(init=False, repr=False)
    _weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dom = self.domain
        n, d = dom.n_subdomains, dom.dim
        labels = dom.region_labels("omega")
        cols = []
        for p in range(n * (d + 1)):
            e = np.zeros(n * (d + 1))
            e[p] = 1.0
            cols.append(lumped_mass(PiecewiseLinearPotential.from_theta(e, n, d), dom, labels))
        self._basis_mass = np.column_stack(cols)
        met = self.metric
        sq = np.sqrt(met.mass)
        self._weight = sq[:, None] * (met.power(0.5) + self.tau ** 2 * met.power(-0.5)) * sq[None, :]
        self._gimp = np.column_stack([met.eigenfunction(k) for k in self.modes]).astype(complex)

    @property
    def n_params(self) -> int:
        return self._basis_mass.shape[1]

    def potential(self, theta) -> PiecewiseLinearPotential:
        return PiecewiseLinearPotential.from_theta(theta, self.domain.n_subdomains, self.domain.dim)

    def operator(self, theta) -> DiscreteOperator:
        return generation_operator(self.domain, self.potential(theta), self.tau)

    def solve(self, theta):
        op = self.operator(theta)
        U = solve_generation_problem(op, self._gimp).values
        return op, U

    def traces(self, theta) -> np.ndarray:
        op, U = self.solve(theta)
        return U[op.impedance_rows]

    def misfit(self, theta, observed: np.ndarray) -> float:
        _, J = self._misfit_state(theta, observed)
        return J

    def _misfit_state(self, theta, observed):
        op, U = self.solve(theta)
        R = U[op.impedance_rows] - observed
        J = float(np.real(np.sum(R.conj() * (self._weight @ R))))
        return (op, U, R), J

    def gradient(self, theta, observed) -> tuple[float, np.ndarray, np.ndarray]:
        """Misfit, its adjoint-state gradient (one extra solve per datum) and the model traces."""
        (op, U, R), J = self._misfit_state(theta, observed)
        rhs = np.zeros_like(U)
        rhs[op.impedance_rows] = np.conj(self._weight @ R)
        lam = op.solve_raw(rhs)
        phi = self._basis_mass[op.active]
        grad = -2.0 * np.real(np.einsum("xk,xp,xk->p", lam, phi, U))
        return J, grad, R + observed

    def jacobian(self, theta) -> np.ndarray:
        """d(traces)/d(theta) stacked over data: shape (n_sigma * m, n_params)."""
        op, U = self.solve(theta)
        phi = self._basis_mass[op.active]
        cols = []
        for p in range(self.n_params):
            dU = -op.solve_raw(phi[:, p:p + 1] * U)
            cols.append(dU[op.impedance_rows].reshape(-1, order="F"))
        return np.column_stack(cols)

    def gauss_newton(self, theta) -> np.ndarray:
        Jm = self.jacobian(theta)
        m = len(self.modes)
        W = np.kron(np.eye(m), self._weight)
        return 2.0 * np.real(Jm.conj().T @ (W @ Jm))


def _reduced_gram(D, H, theta, grad, lo, hi, eps: float = 1e-12) -> np.ndarray:
    """Decouple the coordinates held at a bound from the rest of the Gram inverse.

    Without this a non-diagonal preconditioner combined with a coordinate
    clamp need not give a descent direction (the projected-Newton rule).
    """
    span = hi - lo
    pinned = ((theta <= lo + eps * span) & (grad > 0)) | ((theta >= hi - eps * span) & (grad < 0))
    if not np.any(pinned):
        return D
    Dr = D.copy()
    Dr[pinned, :] = 0.0
    Dr[:, pinned] = 0.0
    diag = np.diag(H)[pinned]
    Dr[pinned, pinned] = 1.0 / np.where(diag > 0, diag, 1.0)
    free = ~pinned
    if np.any(free) and not np.allclose(D, np.diag(np.diag(D))):
        # Gram inverse of the free block, not the free block of the inverse
        Dr[np.ix_(free, free)] = np.linalg.inv(H[np.ix_(free, free)])
    return Dr


def power_iteration(H: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(H.shape[0])
    x /= np.linalg.norm(x)
    val = 0.0
    for _ in range(iters):
        y = H @ x
        val = float(np.linalg.norm(y))
        if val == 0:
            return 0.0
        x = y / val
    return val


@dataclass
class ReconstructionResult:
    theta: np.ndarray
    trace: list[dict]
    converged: bool
    iterations: int

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["iter", "misfit", "aperture", "coefficient_error", "step"])
        for row in self.trace:
            w.writerow([row["iter"], f"{row['misfit']:.17g}", f"{row['aperture']:.17g}",
                        "" if row["coefficient_error"] is None else f"{row['coefficient_error']:.17g}",
                        f"{row['step']:.17g}"])


def _gram_inverse(kind: str, H: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.eye(H.shape[0])
    if kind == "jacobi":
        diag = np.diag(H)
        return np.diag(1.0 / np.where(diag > 0, diag, 1.0))
    if kind == "gauss-newton":
        D = np.linalg.inv(H)
        return 0.5 * (D + D.T)
    raise ValueError(f"unknown gram {kind!r}")


def reconstruct(model: ForwardModel, observed: np.ndarray, theta0, e0: float, iterations: int = 500,
                theta_true=None, gram: str = "gauss-newton", refresh: int = 1,
                rtol: float = 1e-20) -> ReconstructionResult:
    """Projected, preconditioned Landweber iteration on the generation-datum misfit.

    theta_{n+1} = Proj_box(theta_n - step * D grad J(theta_n)).  D is the
    inverse of a parameter-space Gram matrix built from the Gauss-Newton
    Hessian H ("identity", "jacobi": diag(H), or "gauss-newton": H itself),
    rebuilt every ``refresh`` iterations (0: only at theta0).  The step is
    1 / ||D^{1/2} H D^{1/2}|| from power iteration at theta0, halved whenever
    the misfit would increase; five consecutive increases abort unless the
    misfit already sits at round-off level (1e-12 of the initial misfit).
    """
    dom = model.domain
    theta = project_to_box(np.asarray(theta0, dtype=float), dom, e0)
    n_sub, dim = dom.n_subdomains, dom.dim
    a_max, A_max = coefficient_box(dom, e0)
    hi = np.tile(np.r_[a_max, np.full(dim, A_max)], n_sub)
    lo = -hi
    F_obs = observed
    obs_space = subspace_from_pairs(model.metric, F_obs, model._gimp - 1j * model.tau * F_obs)

    def coef_err(t):
        if theta_true is None:
            return None
        diff = PiecewiseLinearPotential.from_theta(t - theta_true, n_sub, dim)
        return coeff_norm(diff) / max(coeff_norm(PiecewiseLinearPotential.from_theta(theta_true, n_sub, dim)), 1e-300)

    def ap(F):
        return aperture(subspace_from_pairs(model.metric, F, model._gimp - 1j * model.tau * F), obs_space)

    J, grad, F = model.gradient(theta, F_obs)
    trace = [{"iter": 0, "misfit": J, "aperture": ap(F), "coefficient_error": coef_err(theta), "step": 0.0}]
    if J == 0 or not np.any(grad):
        return ReconstructionResult(theta, trace, True, 0)
    H = model.gauss_newton(theta)
    D = _gram_inverse(gram, H)
    # ||D^{1/2} H D^{1/2}|| equals the spectral radius of D H
    L = power_iteration(D @ H)
    step = 1.0 / L if L > 0 else 1.0
    trace[0]["step"] = step
    J0 = J
    bad = 0
    converged = False
    it = 0
    for it in range(1, iterations + 1):
        if refresh and it > 1 and (it - 1) % refresh == 0 and bad == 0:
            H = model.gauss_newton(theta)
            D = _gram_inverse(gram, H)
        trial = project_to_box(theta - step * (_reduced_gram(D, H, theta, grad, lo, hi) @ grad), dom, e0)
        J_new, grad_new, F_new = model.gradient(trial, F_obs)
        if J_new > J:
            if J <= 1e-12 * J0:
                # increase is round-off at the misfit floor, not divergence
                converged = True
                break
            step *= 0.5
            bad += 1
            trace.append({"iter": it, "misfit": J, "aperture": trace[-1]["aperture"],
                          "coefficient_error": trace[-1]["coefficient_error"], "step": step})
            if bad >= 5:
                raise ReconstructionDiverged("misfit increased on 5 consecutive steps", trace)
            continue
        bad = 0
        theta, J, grad = trial, J_new, grad_new
        trace.append({"iter": it, "misfit": J, "aperture": ap(F_new), "coefficient_error": coef_err(theta),
                      "step": step})
        if J <= rtol * J0 or not np.any(grad):
            converged = True
            break
    return ReconstructionResult(theta, trace, converged, it)
