"""Grid domains: the physical box Omega, its rectangular partition, the
accessible face Sigma and the augmented domain Omega_0 = Omega U D_0.

Everything lives on a uniform lattice of spacing ``h``.  Geometry is
described per *cell* (the open grid cubes between nodes): every cell carries
the label of the subdomain containing it (0 for D_0, 1..N for D_j, -1 outside
Omega_0).  Node quantities (classes, quadrature weights, stencil weights) are
derived from the labels of the 2**dim cells touching each node, which keeps
interfaces exact on grid planes.
"""

from __future__ import annotations

import enum
import io
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for inconsistent or non-commensurate domain descriptions."""


class ChainError(GeometryError):
    """Raised when a chain of subdomains violates the flat-interface rules."""

    def __init__(self, link: int, message: str):
        self.link = link
        super().__init__(f"link {link}: {message}")


class NodeClass(enum.IntEnum):
    INTERIOR = 0
    DIRICHLET = 1      # on the boundary of Omega_0 away from Sigma_0
    IMPEDANCE = 2      # relative interior of Sigma_0
    ACCESSIBLE = 3     # relative interior of Sigma (on the boundary of Omega)
    EXTERIOR = 4


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.lo)

    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points > np.array(self.lo)) & (points < np.array(self.hi)), axis=1)


@dataclass(frozen=True)
class SigmaFace:
    """Flat accessible portion of the boundary: a rectangle on one box face."""

    axis: int
    side: str          # "lo" or "hi"
    plane: float       # coordinate of the face along ``axis``
    rect: Box          # extents; the ``axis`` component is degenerate

    @property
    def outward(self) -> int:
        """Sign of the outward normal of Omega on this face."""
        return -1 if self.side == "lo" else 1


@dataclass(frozen=True)
class DomainSpec:
    """Box-and-partition description of Omega, parsed from config."""

    dim: int
    box: Box
    subdomains: tuple[Box, ...]
    sigma_axis: int
    sigma_side: str
    r0: float
    sigma_lo: tuple[float, ...] | None = None
    sigma_hi: tuple[float, ...] | None = None
    d0_thickness: float | None = None

    @classmethod
    def from_mapping(cls, data: dict) -> "DomainSpec":
        """Build from a nested mapping (the ``[domain]`` table of a config)."""
        try:
            dim = int(data["dim"])
            lo, hi = data["box"]
            subs = tuple(Box(tuple(map(float, s["lo"])), tuple(map(float, s["hi"])))
                         for s in data["subdomains"])
            sigma = data["sigma"]
            r0 = float(data["r0"])
        except KeyError as exc:
            raise GeometryError(f"domain: missing field {exc.args[0]!r}") from None
        return cls(
            dim=dim,
            box=Box(tuple(map(float, lo)), tuple(map(float, hi))),
            subdomains=subs,
            sigma_axis=int(sigma["axis"]),
            sigma_side=str(sigma.get("side", "lo")),
            r0=r0,
            sigma_lo=tuple(map(float, sigma["lo"])) if "lo" in sigma else None,
            sigma_hi=tuple(map(float, sigma["hi"])) if "hi" in sigma else None,
            d0_thickness=float(data["d0_thickness"]) if "d0_thickness" in data else None,
        )


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Discretized augmented domain Omega_0 with node classification.

    Attributes
    ----------
    dim, h : int, float
        Space dimension and grid spacing.
    lo : ndarray
        Coordinates of node (0, ..., 0) (lower corner of the Omega_0 bounding box).
    shape : tuple of int
        Number of nodes per axis.
    node_class : ndarray of int8
        :class:`NodeClass` per node (flat, C order).
    subdomain : ndarray of int
        Lowest label among the cells touching each node (0 = D_0), -1 if exterior.
    omega_label : ndarray of int
        Lowest Omega label (>= 1) among touching cells, -1 if the node is not in
        the closure of Omega.
    cell_label : ndarray of int
        Label per cell, shape ``tuple(s - 1 for s in shape)``.
    adjacent : ndarray
        ``adjacent[b, i]`` is the label of the cell touching node ``i`` on the
        side encoded by the bits of ``b`` (bit ``a`` set = cell on the + side
        along axis ``a``); -1 outside the lattice.
    """

    dim: int
    h: float
    lo: np.ndarray
    shape: tuple[int, ...]
    node_class: np.ndarray
    subdomain: np.ndarray
    omega_label: np.ndarray
    cell_label: np.ndarray
    adjacent: np.ndarray
    r0: float
    omega_box: Box
    subdomain_boxes: tuple[Box, ...]
    sigma: SigmaFace
    d0_box: Box
    d0_thickness: float
    flags: tuple[str, ...] = field(default=())

    # -- basic lattice helpers -------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_subdomains(self) -> int:
        return len(self.subdomain_boxes)

    @property
    def box(self) -> Box:
        hi = self.lo + self.h * (np.array(self.shape) - 1)
        return Box(tuple(self.lo), tuple(hi))

    def multi_index(self, idx) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(idx), self.shape), axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape)

    def coords(self, idx=None) -> np.ndarray:
        """Coordinates of nodes ``idx`` (all nodes if None), shape (k, dim)."""
        if idx is None:
            idx = np.arange(self.n_nodes)
        return self.lo + self.h * self.multi_index(idx)

    def node_at(self, point: Sequence[float]) -> int:
        """Flat index of the node located at ``point``."""
        k = (np.asarray(point, dtype=float) - self.lo) / self.h
        kr = np.rint(k)
        if np.any(np.abs(k - kr) > 1e-6) or np.any(kr < 0) or np.any(kr >= self.shape):
            raise GeometryError(f"point {tuple(point)} is not a grid node")
        return int(self.flat_index(kr.astype(int)))

    def shifted(self, idx: int, offset: Sequence[int]) -> int:
        """Flat index of the node ``idx + offset`` (offset in lattice units)."""
        m = self.multi_index(idx) + np.asarray(offset, dtype=int)
        if np.any(m < 0) or np.any(m >= self.shape):
            raise GeometryError(f"offset {tuple(offset)} leaves the lattice")
        return int(self.flat_index(m))

    def nodes_of_class(self, *classes: NodeClass) -> np.ndarray:
        return np.flatnonzero(np.isin(self.node_class, [int(c) for c in classes]))

    # -- cell-fraction helpers used by the discretization ----------------------
    def cell_fraction(self, cell_mask_labels: Iterable[int]) -> np.ndarray:
        """Fraction of the 2**dim cells around each node whose label is listed."""
        inside = np.isin(self.adjacent, list(cell_mask_labels))
        return inside.mean(axis=0)

    def region_labels(self, region: str) -> tuple[int, ...]:
        if region == "omega0":
            return tuple(range(0, self.n_subdomains + 1))
        if region == "omega":
            return tuple(range(1, self.n_subdomains + 1))
        raise ValueError(f"unknown region {region!r}")

    def omega_volume(self) -> float:
        return float(np.count_nonzero(self.cell_label >= 1)) * self.h ** self.dim

    def omega_nodes(self) -> np.ndarray:
        """Nodes of the closed physical domain."""
        return np.flatnonzero(self.omega_label >= 1)

    # -- debugging output ------------------------------------------------------
    def dump_classification(self, stream=None) -> str:
        """Text dump, one node per line: index, coordinates, class, subdomain."""
        out = io.StringIO() if stream is None else stream
        xyz = self.coords()
        for i in range(self.n_nodes):
            cls = NodeClass(int(self.node_class[i])).name.lower()
            coords = " ".join(f"{c:.10g}" for c in xyz[i])
            out.write(f"{i} {coords} {cls} {int(self.subdomain[i])}\n")
        return out.getvalue() if stream is None else ""


def _steps(value: float, origin: float, h: float, what: str) -> int:
    k = (value - origin) / h
    if abs(k - round(k)) > _TOL * max(1.0, abs(k)):
        raise GeometryError(f"spacing h={h:g} is not commensurate with {what} = {value:g}")
    return int(round(k))


def build_augmented_domain(spec: DomainSpec, h: float) -> GridDomain:
    """Discretize ``spec`` with spacing ``h`` and attach D_0 across Sigma.

    D_0 is the box ``Sigma x (outside, thickness)`` with ``thickness`` defaulting
    to ``r0 / 2``; Sigma_0 is its face parallel to Sigma at maximal distance.

    Raises
    ------
    GeometryError
        If ``h`` does not divide a fixture dimension, the partition does not
        tile the box, or Sigma is not a rectangle on a face of D_1.
    """
    dim = spec.dim
    if dim < 2:
        raise GeometryError(f"dim must be >= 2, got {dim}")
    if h <= 0:
        raise GeometryError("h must be positive")
    box = spec.box
    if len(box.lo) != dim or len(box.hi) != dim:
        raise GeometryError("box dimension does not match dim")
    origin = np.array(box.lo, dtype=float)

    axes_names = "xyzw"
    for a in range(dim):
        _steps(box.hi[a], origin[a], h, f"box extent along axis {axes_names[a]}")
        for j, sub in enumerate(spec.subdomains, start=1):
            _steps(sub.lo[a], origin[a], h, f"subdomain {j} lower bound along axis {axes_names[a]}")
            _steps(sub.hi[a], origin[a], h, f"subdomain {j} upper bound along axis {axes_names[a]}")

    ax, side = spec.sigma_axis, spec.sigma_side
    if not 0 <= ax < dim or side not in ("lo", "hi"):
        raise GeometryError("sigma must name an axis and a side ('lo' or 'hi')")
    plane = box.lo[ax] if side == "lo" else box.hi[ax]
    d1 = spec.subdomains[0]
    d1_plane = d1.lo[ax] if side == "lo" else d1.hi[ax]
    if abs(d1_plane - plane) > _TOL:
        raise GeometryError("Sigma must lie on a face of subdomain 1")
    s_lo = list(spec.sigma_lo) if spec.sigma_lo is not None else list(d1.lo)
    s_hi = list(spec.sigma_hi) if spec.sigma_hi is not None else list(d1.hi)
    if spec.sigma_lo is not None and abs(s_lo[ax] - plane) > _TOL:
        raise GeometryError("Sigma is not contained in one face of the box")
    if spec.sigma_hi is not None and abs(s_hi[ax] - plane) > _TOL:
        raise GeometryError("Sigma is not contained in one face of the box")
    s_lo[ax] = s_hi[ax] = plane
    for a in range(dim):
        if a == ax:
            continue
        if s_lo[a] < d1.lo[a] - _TOL or s_hi[a] > d1.hi[a] + _TOL or s_hi[a] - s_lo[a] <= _TOL:
            raise GeometryError("Sigma is not contained in one face of the box "
                                "(it must be a non-empty rectangle on the face of subdomain 1)")
        _steps(s_lo[a], origin[a], h, f"Sigma lower bound along axis {axes_names[a]}")
        _steps(s_hi[a], origin[a], h, f"Sigma upper bound along axis {axes_names[a]}")
    rect = Box(tuple(s_lo), tuple(s_hi))
    sigma = SigmaFace(axis=ax, side=side, plane=plane, rect=rect)

    thickness = spec.d0_thickness if spec.d0_thickness is not None else spec.r0 / 2
    _steps(thickness, 0.0, h, "D_0 thickness")
    d0_lo, d0_hi = list(s_lo), list(s_hi)
    if side == "lo":
        d0_lo[ax] = plane - thickness
    else:
        d0_hi[ax] = plane + thickness
    d0_box = Box(tuple(d0_lo), tuple(d0_hi))

    bb_lo = np.minimum(box.lo, d0_box.lo)
    bb_hi = np.maximum(box.hi, d0_box.hi)
    n_cells = tuple(int(round((bb_hi[a] - bb_lo[a]) / h)) for a in range(dim))
    shape = tuple(n + 1 for n in n_cells)

    # label cells by their centers
    centers_1d = [bb_lo[a] + h * (np.arange(n_cells[a]) + 0.5) for a in range(dim)]
    grids = np.meshgrid(*centers_1d, indexing="ij")
    centers = np.stack([g.ravel() for g in grids], axis=1)
    labels = np.full(centers.shape[0], -1, dtype=np.int16)
    hits = np.zeros(centers.shape[0], dtype=np.int16)
    for j, sub in enumerate(spec.subdomains, start=1):
        inside = sub.contains(centers)
        labels[inside] = j
        hits += inside
    in_box = box.contains(centers)
    if np.any(hits[in_box] != 1) or np.any(hits[~in_box] != 0):
        raise GeometryError("subdomains must tile the box without overlap")
    labels[d0_box.contains(centers)] = 0
    cell_label = labels.reshape(n_cells)

    # labels of the 2**dim cells touching each node
    padded = np.pad(cell_label, 1, constant_values=-1)
    adjacent = np.empty((2 ** dim,) + shape, dtype=np.int16)
    for b in range(2 ** dim):
        sl = tuple(slice(1, s + 1) if (b >> a) & 1 else slice(0, s) for a, s in enumerate(shape))
        adjacent[b] = padded[sl]
    adjacent = adjacent.reshape(2 ** dim, -1)

    big = np.iinfo(np.int16).max
    in_o0 = adjacent >= 0
    subdomain = np.where(in_o0, adjacent, big).min(axis=0).astype(np.int64)
    subdomain[subdomain == big] = -1
    in_om = adjacent >= 1
    omega_label = np.where(in_om, adjacent, big).min(axis=0).astype(np.int64)
    omega_label[omega_label == big] = -1

    n_in = in_o0.sum(axis=0)
    multi = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
    xyz = bb_lo + h * multi
    others = [a for a in range(dim) if a != ax]

    def strictly_inside_rect(plane_coord: float) -> np.ndarray:
        ok = np.abs(xyz[:, ax] - plane_coord) < _TOL * max(1.0, h)
        for a in others:
            ok &= (xyz[:, a] > rect.lo[a] + 0.5 * h) & (xyz[:, a] < rect.hi[a] - 0.5 * h)
        return ok

    sigma0_plane = d0_box.lo[ax] if side == "lo" else d0_box.hi[ax]
    on_sigma = strictly_inside_rect(plane)
    on_sigma0 = strictly_inside_rect(sigma0_plane)

    node_class = np.full(len(n_in), int(NodeClass.EXTERIOR), dtype=np.int8)
    full = n_in == 2 ** dim
    partial = (n_in > 0) & ~full
    node_class[full] = NodeClass.INTERIOR
    node_class[partial] = NodeClass.DIRICHLET
    node_class[partial & on_sigma0] = NodeClass.IMPEDANCE
    node_class[full & on_sigma] = NodeClass.ACCESSIBLE

    flags = ("out_of_paper_regime",) if dim == 2 else ()
    arrays = (node_class, subdomain, omega_label, cell_label, adjacent)
    for arr in arrays:
        arr.setflags(write=False)
    lo_arr = np.array(bb_lo, dtype=float)
    lo_arr.setflags(write=False)
    return GridDomain(
        dim=dim, h=float(h), lo=lo_arr, shape=shape, node_class=node_class,
        subdomain=subdomain, omega_label=omega_label, cell_label=cell_label,
        adjacent=adjacent, r0=float(spec.r0), omega_box=box,
        subdomain_boxes=tuple(spec.subdomains), sigma=sigma, d0_box=d0_box,
        d0_thickness=float(thickness), flags=flags,
    )


# -- chains ----------------------------------------------------------------------

@dataclass(frozen=True)
class ChainLink:
    """Flat interface Sigma_k between D_{j_{k-1}} and D_{j_k}."""

    k: int
    from_label: int
    to_label: int
    axis: int
    nodes: tuple[int, ...]
    center: tuple[float, ...]
    center_node: int
    normal: tuple[float, ...]
    flat_radius: float
    rect: Box


@dataclass(frozen=True)
class Chain:
    order: tuple[int, ...]
    links: tuple[ChainLink, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.order)


def _shared_face(a: Box, b: Box, dim: int):
    """Return (axis, sign, rect) of the face shared by boxes a -> b, or None."""
    for ax in range(dim):
        for sign, pa, pb in ((1, a.hi[ax], b.lo[ax]), (-1, a.lo[ax], b.hi[ax])):
            if abs(pa - pb) > _TOL:
                continue
            lo = [max(a.lo[i], b.lo[i]) for i in range(dim)]
            hi = [min(a.hi[i], b.hi[i]) for i in range(dim)]
            lo[ax] = hi[ax] = pa
            if all(hi[i] - lo[i] > _TOL for i in range(dim) if i != ax):
                return ax, sign, Box(tuple(lo), tuple(hi))
    return None


def _link(domain: GridDomain, k: int, frm: int, to: int, ax: int, sign: int, rect: Box) -> ChainLink:
    dim, h = domain.dim, domain.h
    others = [i for i in range(dim) if i != ax]
    radius = min((rect.hi[i] - rect.lo[i]) / 2 for i in others)
    if radius < domain.r0 / 3 - _TOL:
        raise ChainError(k, f"flat interface radius {radius:g} is below r0/3 = {domain.r0 / 3:g}")
    xyz = domain.coords()
    ok = np.abs(xyz[:, ax] - rect.lo[ax]) < 0.5 * h
    for i in others:
        ok &= (xyz[:, i] > rect.lo[i] + 0.5 * h) & (xyz[:, i] < rect.hi[i] - 0.5 * h)
    nodes = tuple(int(i) for i in np.flatnonzero(ok))
    if not nodes:
        raise ChainError(k, "interface contains no grid nodes")
    centroid = (np.array(rect.lo) + np.array(rect.hi)) / 2
    snapped = domain.lo + h * np.rint((centroid - domain.lo) / h)
    normal = np.zeros(dim)
    normal[ax] = sign
    return ChainLink(
        k=k, from_label=frm, to_label=to, axis=ax, nodes=nodes,
        center=tuple(float(c) for c in snapped), center_node=domain.node_at(snapped),
        normal=tuple(float(c) for c in normal), flat_radius=float(radius), rect=rect,
    )


def validate_chain(domain: GridDomain, chain: Chain | Sequence[int]) -> Chain:
    """Check the flat-interface assumptions along ``chain`` and fill in links.

    Link 1 joins the exterior (D_0 side) to D_{j_1} through Sigma; link k >= 2
    joins D_{j_{k-1}} to D_{j_k}.  Normals point from D_{j_{k-1}} into D_{j_k}.
    """
    order = tuple(int(j) for j in (chain.order if isinstance(chain, Chain) else chain))
    if not order:
        raise ChainError(1, "empty chain")
    for k, j in enumerate(order, start=1):
        if not 1 <= j <= domain.n_subdomains:
            raise ChainError(k, f"subdomain index {j} does not exist")
    dim = domain.dim
    sig = domain.sigma
    links = []

    first = domain.subdomain_boxes[order[0] - 1]
    face = first.lo[sig.axis] if sig.side == "lo" else first.hi[sig.axis]
    lo = [max(first.lo[i], sig.rect.lo[i]) for i in range(dim)]
    hi = [min(first.hi[i], sig.rect.hi[i]) for i in range(dim)]
    lo[sig.axis] = hi[sig.axis] = sig.plane
    touches = abs(face - sig.plane) <= _TOL and all(
        hi[i] - lo[i] > _TOL for i in range(dim) if i != sig.axis)
    if not touches:
        raise ChainError(1, f"subdomain {order[0]} does not touch Sigma")
    links.append(_link(domain, 1, 0, order[0], sig.axis, -sig.outward, Box(tuple(lo), tuple(hi))))

    for k in range(2, len(order) + 1):
        a = domain.subdomain_boxes[order[k - 2] - 1]
        b = domain.subdomain_boxes[order[k - 1] - 1]
        shared = _shared_face(a, b, dim)
        if shared is None:
            raise ChainError(k, f"subdomains {order[k - 2]} and {order[k - 1]} share no flat interface")
        ax, sign, rect = shared
        links.append(_link(domain, k, order[k - 2], order[k - 1], ax, sign, rect))
    return Chain(order=order, links=tuple(links))
