"""Grid domains, sampled fields, norms, measures and closed-form potentials.

A domain is a cell mask on a uniform grid. Fields live on the grid nodes
(``dims + 1`` per axis) with components on the last axis. Potentials are
stored as closed-form data so that their gradient is exact everywhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import product
from math import factorial
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.special import expit

from . import _kuhn
from .errors import EmptyDomainError, LusinError


# ----------------------------------------------------------------------------
# domains
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Open set given as a cell mask on a uniform grid.

    ``origin`` is the lower bbox corner, ``h`` the spacing and ``mask`` has one
    flag per cell. The cell with index ``i`` is ``origin + [i, i+1] * h``.
    """

    origin: np.ndarray
    h: float
    mask: np.ndarray

    def __post_init__(self):
        origin = np.array(self.origin, dtype=float).reshape(-1)
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim < 2:
            raise LusinError("dimension must be at least 2")
        if origin.shape != (mask.ndim,):
            raise LusinError("origin does not match mask dimension")
        if not (self.h > 0 and np.isfinite(self.h)):
            raise LusinError("grid spacing must be positive")
        origin.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def box(cls, cells: int | Sequence[int], lo=0.0, hi=1.0, dim: int = 2):
        """Full box ``[lo, hi]^N`` split into ``cells`` cells per axis (cubic cells)."""
        if np.isscalar(cells):
            cells = (int(cells),) * dim
        cells = tuple(int(c) for c in cells)
        h = (hi - lo) / cells[0]
        return cls(np.full(len(cells), float(lo)), h, np.ones(cells, dtype=bool))

    @property
    def N(self) -> int:
        return self.mask.ndim

    @property
    def dims(self) -> tuple:
        return self.mask.shape

    @property
    def node_shape(self) -> tuple:
        return tuple(d + 1 for d in self.mask.shape)

    @property
    def cell_volume(self) -> float:
        return self.h**self.N

    @property
    def bbox(self):
        return self.origin.copy(), self.origin + np.array(self.dims) * self.h

    def with_mask(self, mask) -> "GridDomain":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.dims:
            raise LusinError("mask shape does not match the grid")
        return GridDomain(self.origin, self.h, mask)

    def node_axes(self):
        return [self.origin[i] + self.h * np.arange(n) for i, n in enumerate(self.node_shape)]

    def node_points(self) -> np.ndarray:
        """All node coordinates, shape ``node_shape + (N,)``."""
        grids = np.meshgrid(*self.node_axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def cell_centers(self) -> np.ndarray:
        axes = [self.origin[i] + self.h * (np.arange(n) + 0.5) for i, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def domain_nodes(self) -> np.ndarray:
        """Node mask of the closed domain (corners of included cells)."""
        return nodes_of_cells(self.mask)


def measure(domain: GridDomain, mask=None) -> float:
    """Lebesgue measure of ``mask`` (default: the domain itself)."""
    m = domain.mask if mask is None else np.asarray(mask, dtype=bool)
    return int(np.count_nonzero(m)) * domain.cell_volume


def _corner_slices(shape, offset):
    return tuple(slice(o, o + s) for o, s in zip(offset, shape))


def nodes_of_cells(cells: np.ndarray) -> np.ndarray:
    """Nodes that are a corner of at least one flagged cell."""
    cells = np.asarray(cells, dtype=bool)
    out = np.zeros(tuple(d + 1 for d in cells.shape), dtype=bool)
    for e in product((0, 1), repeat=cells.ndim):
        out[_corner_slices(cells.shape, e)] |= cells
    return out


def interior_nodes(cells: np.ndarray) -> np.ndarray:
    """Nodes whose every adjacent cell exists and is flagged."""
    cells = np.asarray(cells, dtype=bool)
    out = np.ones(tuple(d + 1 for d in cells.shape), dtype=bool)
    for e in product((0, 1), repeat=cells.ndim):
        tmp = np.zeros_like(out)
        tmp[_corner_slices(cells.shape, e)] = cells
        out &= tmp
    return out


def cells_touching(nodes: np.ndarray) -> np.ndarray:
    """Cells with at least one flagged corner node."""
    nodes = np.asarray(nodes, dtype=bool)
    shape = tuple(d - 1 for d in nodes.shape)
    out = np.zeros(shape, dtype=bool)
    for e in product((0, 1), repeat=nodes.ndim):
        out |= nodes[_corner_slices(shape, e)]
    return out


def cell_distance_to_complement(domain: GridDomain) -> np.ndarray:
    """Exact distance from each closed cell to the complement of the domain.

    Box-to-box distances on an integer lattice are attained at lattice nodes,
    so a node-level Euclidean distance transform is exact.
    """
    padded = np.pad(domain.mask, 1, constant_values=False)
    outside_nodes = nodes_of_cells(~padded)
    dist = distance_transform_edt(~outside_nodes)
    shape = padded.shape
    cell_min = np.full(shape, np.inf)
    for e in product((0, 1), repeat=domain.N):
        cell_min = np.minimum(cell_min, dist[_corner_slices(shape, e)])
    inner = tuple(slice(1, -1) for _ in range(domain.N))
    return cell_min[inner] * domain.h


def shrink(domain: GridDomain, a: float) -> GridDomain:
    """Cells whose every point lies at distance >= a from the complement."""
    if a < 0:
        raise LusinError("shrink radius must be non-negative")
    if a == 0:
        return domain
    keep = domain.mask & (cell_distance_to_complement(domain) >= a)
    return domain.with_mask(keep)


# ----------------------------------------------------------------------------
# fields
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampledVectorField:
    """One N-vector per grid node, stored with shape ``node_shape + (N,)``."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        want = self.domain.node_shape + (self.domain.N,)
        if vals.shape != want:
            raise LusinError(f"field shape {vals.shape} does not match {want}")
        if not np.all(np.isfinite(vals)):
            raise LusinError("field contains non-finite samples")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=-1))

    def replace(self, values) -> "SampledVectorField":
        return SampledVectorField(self.domain, values)


@dataclass(frozen=True, eq=False)
class SampledScalarField:
    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != self.domain.node_shape:
            raise LusinError("scalar field shape does not match the node grid")
        if not np.all(np.isfinite(vals)):
            raise LusinError("field contains non-finite samples")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def discrete_jacobian(field: SampledVectorField) -> np.ndarray:
    """Central differences inside, one-sided at the grid edge. Shape ``nodes + (N, N)``."""
    v = field.values
    N = field.domain.N
    cols = []
    for c in range(N):
        g = np.gradient(v[..., c], field.domain.h)
        cols.append(np.stack(g, axis=-1))
    return np.stack(cols, axis=-2)


# ----------------------------------------------------------------------------
# blend profile (part of the potential format)
# ----------------------------------------------------------------------------

RAMP_NAME = "expit(2t/(1-t^2)) on (-1,1)"
RAMP_MAX_SLOPE = 0.7668220496  # attained at t = +-0.586


def ramp(t):
    """Smooth step: 0 for t <= -1, 1 for t >= 1, ramp(t) + ramp(-t) = 1."""
    t = np.asarray(t, dtype=float)
    out = np.where(t >= 1.0, 1.0, 0.0)
    mid = np.abs(t) < 1.0
    tm = t[mid]
    out[mid] = expit(2.0 * tm / (1.0 - tm * tm))
    return out


def ramp_prime(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    mid = np.abs(t) < 1.0
    tm = t[mid]
    q = 1.0 - tm * tm
    x = 2.0 * tm / q
    out[mid] = expit(x) * expit(-x) * 2.0 * (1.0 + tm * tm) / (q * q)
    return out


def _ramp_both(t):
    t = np.asarray(t, dtype=float)
    s = np.where(t >= 1.0, 1.0, 0.0)
    ds = np.zeros_like(t)
    mid = np.abs(t) < 1.0
    if np.any(mid):
        tm = t[mid]
        q = 1.0 - tm * tm
        x = 2.0 * tm / q
        e = expit(x)
        s[mid] = e
        ds[mid] = e * expit(-x) * 2.0 * (1.0 + tm * tm) / (q * q)
    return s, ds


# ----------------------------------------------------------------------------
# closed-form potentials
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvaluablePotential:
    """phi = sum_tau rho_tau psi_tau with psi_tau(x) = vbar_tau . (x - b_tau).

    The mesh is the Kuhn triangulation of cubes ``origin + (j + [0,1]^N) H``;
    ``vbar`` has shape ``counts + (N!, N)``. Cubes outside the array carry
    zero gradient. The partition of unity is ``w_tau = prod_f ramp(d_f / r)``
    normalized by its sum, where ``d_f`` is the signed distance to facet ``f``.
    """

    origin: np.ndarray
    H: float
    vbar: np.ndarray
    r: float
    level: int = 0
    chunk: int = 32768
    _nonzero: bool = field(init=False, repr=False, default=True)

    def __post_init__(self):
        origin = np.array(self.origin, dtype=float).reshape(-1)
        vbar = np.array(self.vbar, dtype=np.float64)
        N = origin.size
        if vbar.ndim != N + 2 or vbar.shape[-2:] != (factorial(N), N):
            raise LusinError("vbar shape does not match the dimension")
        if not (0 < self.r < _kuhn.node_clearance(N) * self.H):
            raise LusinError("blend radius must lie in (0, node clearance)")
        origin.setflags(write=False)
        vbar.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "vbar", vbar)
        object.__setattr__(self, "_nonzero", bool(np.any(vbar != 0.0)))

    @property
    def N(self) -> int:
        return self.origin.size

    @property
    def counts(self) -> tuple:
        return self.vbar.shape[: self.N]

    @classmethod
    def zero(cls, N: int = 2) -> "EvaluablePotential":
        return cls(np.zeros(N), 1.0, np.zeros((1,) * N + (factorial(N), N)), 0.1)

    def barycenters(self) -> np.ndarray:
        """Barycenters with shape ``counts + (N!, N)``."""
        N = self.N
        idx = np.stack(np.meshgrid(*[np.arange(c) for c in self.counts], indexing="ij"), axis=-1)
        off = _kuhn.barycenter_offsets(N)
        return self.origin + (idx[..., None, :] + off) * self.H

    def sup_bound(self) -> float:
        """Certified bound on sup|phi| from the per-simplex data."""
        if not self._nonzero:
            return 0.0
        mags = np.sqrt(np.sum(self.vbar**2, axis=-1))
        return float(mags.max() * (_kuhn.barycenter_radius(self.N) * self.H + self.r))

    def value_and_grad(self, points):
        pts = np.asarray(points, dtype=float)
        shp = pts.shape[:-1]
        pts = pts.reshape(-1, self.N)
        phi = np.zeros(pts.shape[0])
        grad = np.zeros_like(pts)
        if self._nonzero:
            slow = self._eval_interior(pts, phi, grad)
            idx = np.flatnonzero(slow)
            for s in range(0, idx.size, self.chunk):
                sel = idx[s : s + self.chunk]
                phi[sel], grad[sel] = self._eval(pts[sel])
        return phi.reshape(shp), grad.reshape(shp + (self.N,))

    def _eval_interior(self, p, phi, grad) -> np.ndarray:
        """Fill points at distance >= r from every facet of their simplex; return the rest.

        There the own weight is exactly 1 and all others exactly 0, so the
        blend reduces to the affine piece.
        """
        N = self.N
        G, g0 = _kuhn.facets(N)
        y = (p - self.origin) / self.H
        j = np.floor(y).astype(np.int64)
        u = y - j
        order = np.argsort(-u, axis=1, kind="stable")
        codes = _kuhn.perm_codes(N)
        s = codes[tuple(order.T)]
        t = (np.einsum("mfn,mn->mf", G[s], u) + g0[s]) * (self.H / self.r)
        fast = np.all(t >= 1.0, axis=1)
        counts = np.array(self.counts)
        inside = np.all((j >= 0) & (j < counts), axis=1)
        sel = fast & inside
        if sel.any():
            vb = self.vbar[tuple(j[sel].T)][np.arange(int(sel.sum())), s[sel]]
            b = self.origin + (j[sel] + _kuhn.barycenter_offsets(N)[s[sel]]) * self.H
            phi[sel] = np.sum(vb * (p[sel] - b), axis=1)
            grad[sel] = vb
        return ~fast

    def value(self, points):
        return self.value_and_grad(points)[0]

    def gradient(self, points):
        return self.value_and_grad(points)[1]

    def _eval(self, p):
        N = self.N
        H, r = self.H, self.r
        G, g0 = _kuhn.facets(N)
        boff = _kuhn.barycenter_offsets(N)
        counts = np.array(self.counts)
        y = (p - self.origin) / H
        j0 = np.floor(y).astype(np.int64)
        M = p.shape[0]
        num = np.zeros(M)
        dnum = np.zeros((M, N))
        W = np.zeros(M)
        dW = np.zeros((M, N))
        for d in product((-1, 0, 1), repeat=N):
            j = j0 + np.array(d)
            u = y - j
            inside = np.all((j >= 0) & (j < counts), axis=1)
            jc = np.clip(j, 0, counts - 1)
            vb = self.vbar[tuple(jc.T)]
            vb = vb * inside[:, None, None]
            for s in range(G.shape[0]):
                t = (u @ G[s].T + g0[s]) * (H / r)
                sv, dsv = _ramp_both(t)
                w = np.prod(sv, axis=1)
                if not np.any(w):
                    continue
                dw = np.zeros((M, N))
                for f in range(N + 1):
                    others = np.prod(np.delete(sv, f, axis=1), axis=1)
                    dw += (dsv[:, f] * others / r)[:, None] * G[s, f]
                b = self.origin + (j + boff[s]) * H
                psi = np.sum(vb[:, s] * (p - b), axis=1)
                num += w * psi
                dnum += dw * psi[:, None] + w[:, None] * vb[:, s]
                W += w
                dW += dw
        phi = num / W
        grad = (dnum - phi[:, None] * dW) / W[:, None]
        return phi, grad

    def near_skeleton(self, points) -> np.ndarray:
        """Points within r of a facet of their simplex next to nonzero data (the blend zone).

        Elsewhere the gradient equals the gradient datum of the containing simplex.
        """
        N = self.N
        p = np.asarray(points, dtype=float).reshape(-1, N)
        if not self._nonzero:
            return np.zeros(p.shape[0], dtype=bool)
        y = (p - self.origin) / self.H
        j0 = np.floor(y).astype(np.int64)
        u = y - j0
        G, g0 = _kuhn.facets(N)
        order = np.argsort(-u, axis=1, kind="stable")
        s = _kuhn.perm_codes(N)[tuple(order.T)]
        dist = (np.einsum("mfn,mn->mf", G[s], u) + g0[s]).min(axis=1) * self.H
        counts = np.array(self.counts)
        busy = np.any(self.vbar != 0.0, axis=(-2, -1))
        touched = np.zeros(p.shape[0], dtype=bool)
        for d in product((-1, 0, 1), repeat=N):
            j = j0 + np.array(d)
            ok = np.all((j >= 0) & (j < counts), axis=1)
            touched |= ok & busy[tuple(np.clip(j, 0, counts - 1).T)]
        return (dist < self.r) & touched

    def probe_points(self) -> np.ndarray:
        """Facet centroids of simplices with nonzero gradient data.

        The blend gradient peaks on facets, so norm estimates include these.
        """
        N = self.N
        mags = np.any(self.vbar != 0.0, axis=-1)
        if not mags.any():
            return np.zeros((0, N))
        cube_idx, perm_idx = np.nonzero(mags.reshape(-1, mags.shape[-1]))
        cube = np.stack(np.unravel_index(cube_idx, self.counts), axis=-1)
        verts = _kuhn.vertex_offsets(N)[perm_idx]  # (K, N+1, N)
        total = verts.sum(axis=1)
        cents = (total[:, None, :] - verts) / N  # facet f excludes vertex f
        pts = self.origin + (cube[:, None, :] + cents) * self.H
        return pts.reshape(-1, N)

    def nonzero_table(self):
        """Rows (cube index, permutation, barycenter, gradient) of simplices with nonzero data."""
        mask = np.any(self.vbar != 0.0, axis=-1)
        idx = np.argwhere(mask)
        bary = self.origin + (idx[:, : self.N] + _kuhn.barycenter_offsets(self.N)[idx[:, -1]]) * self.H
        grads = self.vbar[mask]
        return idx, bary, grads


@dataclass(frozen=True, eq=False)
class PotentialSum:
    """Finite ordered sum of closed-form potentials, evaluated lazily."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def N(self) -> int:
        return self.terms[0].N if self.terms else 2

    def value_and_grad(self, points):
        pts = np.asarray(points, dtype=float)
        phi = np.zeros(pts.shape[:-1])
        grad = np.zeros(pts.shape)
        for t in self.terms:
            a, b = t.value_and_grad(pts)
            phi = phi + a
            grad = grad + b
        return phi, grad

    def value(self, points):
        return self.value_and_grad(points)[0]

    def gradient(self, points):
        return self.value_and_grad(points)[1]

    def sup_bound(self) -> float:
        return float(sum(t.sup_bound() for t in self.terms))

    def near_skeleton(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.N)
        out = np.zeros(pts.shape[0], dtype=bool)
        for t in self.terms:
            out |= t.near_skeleton(pts)
        return out

    def probe_points(self) -> np.ndarray:
        chunks = [t.probe_points() for t in self.terms]
        chunks = [c for c in chunks if c.size]
        if not chunks:
            return np.zeros((0, self.N))
        return np.unique(np.concatenate(chunks), axis=0)


# ----------------------------------------------------------------------------
# norms
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class NormReport:
    """Norms with the convention c1 = sup + grad_sup, so C0 = 1."""

    sup_norm: float
    grad_sup_norm: float
    x_norm: float

    @property
    def c1_norm(self) -> float:
        return self.sup_norm + self.grad_sup_norm


C0 = 1.0


def sample_lattice(domain: GridDomain, oversample: int = 2) -> np.ndarray:
    lo, hi = domain.bbox
    n = [d * oversample + 1 for d in domain.dims]
    axes = [np.linspace(lo[i], hi[i], n[i]) for i in range(domain.N)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.N)


def norms(f, domain: GridDomain, oversample: int = 2, probes: bool = True) -> NormReport:
    """Sup-type norms of a sampled field or a closed-form potential."""
    if not domain.mask.any():
        raise EmptyDomainError("empty domain")
    if isinstance(f, SampledVectorField):
        nodes = domain.domain_nodes()
        x = float(f.magnitude()[nodes].max())
        jac = discrete_jacobian(f)
        g = float(np.sqrt(np.sum(jac**2, axis=(-2, -1)))[nodes].max())
        return NormReport(x, g, x)
    if isinstance(f, SampledScalarField):
        nodes = domain.domain_nodes()
        s = float(np.abs(f.values)[nodes].max())
        g = np.stack(np.gradient(f.values, domain.h), axis=-1)
        gs = float(np.sqrt(np.sum(g**2, axis=-1))[nodes].max())
        return NormReport(s, gs, gs)
    pts = sample_lattice(domain, oversample)
    if probes:
        extra = f.probe_points()
        if extra.size:
            pts = np.concatenate([pts, extra])
    phi, grad = f.value_and_grad(pts)
    s = float(np.abs(phi).max())
    g = float(np.sqrt(np.sum(grad**2, axis=-1)).max())
    return NormReport(s, g, g)


# ----------------------------------------------------------------------------
# text dumps
# ----------------------------------------------------------------------------

_HEADER = re.compile(
    r"^LGF1 N=(?P<N>\d+) dims=(?P<dims>[\d,]+) h=(?P<h>\S+) origin=(?P<origin>\S+) components=(?P<c>\d+)(?P<extra>.*)$"
)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_header(N, dims, h, origin, components, extra: str = "") -> str:
    head = (
        f"LGF1 N={N} dims={','.join(str(int(d)) for d in dims)} h={_fmt(h)} "
        f"origin={','.join(_fmt(o) for o in origin)} components={components}"
    )
    return head + (" " + extra if extra else "")


def _write_records(fh, arr2d):
    for row in arr2d:
        fh.write(" ".join(repr(float(x)) for x in row))
        fh.write("\n")


def write_field(path, fld: SampledVectorField | SampledScalarField, extra: str = ""):
    d = fld.domain
    vals = fld.values
    comps = 1 if vals.ndim == d.N else vals.shape[-1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_header(d.N, d.node_shape, d.h, d.origin, comps, extra) + "\n")
        _write_records(fh, vals.reshape(-1, comps))


def write_mask(path, domain: GridDomain, mask):
    mask = np.asarray(mask, dtype=bool)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_header(domain.N, mask.shape, domain.h, domain.origin, 1) + "\n")
        fh.write("\n".join("1" if m else "0" for m in mask.reshape(-1)))
        fh.write("\n")


def parse_header(line: str) -> dict:
    m = _HEADER.match(line.strip())
    if not m:
        raise LusinError("not an LGF1 header")
    N = int(m["N"])
    dims = tuple(int(x) for x in m["dims"].split(","))
    origin = tuple(float(x) for x in m["origin"].split(","))
    if len(dims) != N or len(origin) != N:
        raise LusinError("header dimension mismatch")
    return {"N": N, "dims": dims, "h": float(m["h"]), "origin": origin, "components": int(m["c"]), "extra": m["extra"].strip()}


def read_records(path):
    with open(path, encoding="utf-8") as fh:
        head = parse_header(fh.readline())
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    n = int(np.prod(head["dims"]))
    if data.shape != (n, head["components"]):
        raise LusinError("record count does not match header")
    return head, data.reshape(head["dims"] + (head["components"],))


def read_field(path, mask=None) -> SampledVectorField:
    """Read a node dump; the domain is the full box unless a cell mask is given."""
    head, data = read_records(path)
    cells = tuple(d - 1 for d in head["dims"])
    m = np.ones(cells, dtype=bool) if mask is None else mask
    dom = GridDomain(np.array(head["origin"]), head["h"], m)
    return SampledVectorField(dom, data)


def read_mask(path):
    head, data = read_records(path)
    return head, data[..., 0] != 0.0
