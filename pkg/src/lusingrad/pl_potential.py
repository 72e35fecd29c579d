"""Kuhn meshes, per-simplex affine potentials, skeleton tubes, blending, and the rough approximation."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import factorial

import numpy as np
from scipy.ndimage import map_coordinates

from . import _kuhn
from .errors import BudgetError, EmptyDomainError, GridTooCoarseError, LusinError
from .field_core import (
    EvaluablePotential,
    GridDomain,
    SampledVectorField,
    cells_touching,
    interior_nodes,
    measure,
    nodes_of_cells,
    shrink,
)
from .preprocess import choose_sigma, luzin_truncate, mollify


# ----------------------------------------------------------------------------
# mesh
# ----------------------------------------------------------------------------


def _summed(mask: np.ndarray) -> np.ndarray:
    s = np.pad(mask.astype(np.int64), [(1, 0)] * mask.ndim)
    for ax in range(mask.ndim):
        s = np.cumsum(s, axis=ax)
    return s


def _box_all(mask: np.ndarray, lo: list, hi: list) -> np.ndarray:
    """For axis-wise index ranges [lo_i, hi_i] (broadcast grid), True where every cell is flagged."""
    N = mask.ndim
    S = _summed(mask)
    ok = np.ones(tuple(len(x) for x in lo), dtype=bool)
    los, his = [], []
    for ax in range(N):
        shape = [1] * N
        shape[ax] = -1
        valid = (lo[ax] >= 0) & (hi[ax] <= mask.shape[ax] - 1)
        ok &= valid.reshape(shape)
        los.append(np.clip(lo[ax], 0, mask.shape[ax]).reshape(shape))
        his.append(np.clip(hi[ax] + 1, 0, mask.shape[ax]).reshape(shape))
    total = np.zeros(ok.shape, dtype=np.int64)
    size = np.ones(ok.shape, dtype=np.int64)
    for ax in range(N):
        size = size * (his[ax] - los[ax])
    for e in product((0, 1), repeat=N):
        idx = tuple(his[ax] if e[ax] else los[ax] for ax in range(N))
        sign = (-1) ** (N - sum(e))
        total = total + sign * S[idx]
    return ok & (total == size) & (size > 0)


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Kuhn triangulation of cubes ``origin + (j + [0,1]^N) H`` with ``cube_mask`` selecting cubes.

    With ``offset`` the cube lattice is shifted so that every grid node is the
    barycenter of one simplex; grid nodes then stay off the skeleton.
    """

    region: GridDomain
    level: int
    offset: bool
    origin: np.ndarray
    H: float
    cube_mask: np.ndarray

    @property
    def N(self) -> int:
        return self.region.N

    @property
    def counts(self) -> tuple:
        return self.cube_mask.shape

    @property
    def n_cubes(self) -> int:
        return int(np.count_nonzero(self.cube_mask))

    @property
    def n_simplices(self) -> int:
        return self.n_cubes * factorial(self.N)

    @property
    def simplex_volume(self) -> float:
        return self.H**self.N / factorial(self.N)

    @property
    def max_diameter(self) -> float:
        return float(np.sqrt(self.N) * self.H)

    def total_volume(self) -> float:
        return self.n_simplices * self.simplex_volume

    def vertices(self) -> np.ndarray:
        """Vertex coordinates of every included simplex, shape (n, N+1, N)."""
        idx = np.argwhere(self.cube_mask)
        vo = _kuhn.vertex_offsets(self.N)
        out = idx[:, None, None, :] + vo[None]
        return (self.origin + out * self.H).reshape(-1, self.N + 1, self.N)

    def barycenters(self) -> np.ndarray:
        """Barycenters for all cubes of the lattice, shape ``counts + (N!, N)``."""
        idx = np.stack(np.meshgrid(*[np.arange(c) for c in self.counts], indexing="ij"), axis=-1)
        return self.origin + (idx[..., None, :] + _kuhn.barycenter_offsets(self.N)) * self.H

    def exposed_faces(self) -> int:
        """Cube faces between an included cube and an excluded one."""
        pad = np.pad(self.cube_mask, 1).astype(np.int8)
        return int(sum(np.count_nonzero(np.diff(pad, axis=ax)) for ax in range(self.N)))

    def skeleton_area(self) -> float:
        """Total (N-1)-measure of distinct faces of the included simplices."""
        per_cube = factorial(self.N) * _kuhn.facet_area_sum(self.N)
        return 0.5 * (self.n_cubes * per_cube + self.exposed_faces()) * self.H ** (self.N - 1)

    def cubes_within(self, cells: np.ndarray) -> np.ndarray:
        """Cubes of the lattice whose closure lies in the closed union of flagged cells."""
        h = self.region.h
        lo, hi = [], []
        rel = self.H / h
        for ax, c in enumerate(self.counts):
            start = (self.origin[ax] - self.region.origin[ax]) / h + np.arange(c) * rel
            first = np.floor(start + 1e-9).astype(np.int64)
            last = np.ceil(start + rel - 1e-9).astype(np.int64) - 1
            lo.append(first)
            hi.append(last)
        return _box_all(np.asarray(cells, dtype=bool), lo, hi)

    def locate(self, points):
        """Cube index and permutation index of the simplex containing each point."""
        p = np.asarray(points, dtype=float).reshape(-1, self.N)
        y = (p - self.origin) / self.H
        j = np.floor(y).astype(np.int64)
        u = y - j
        order = np.argsort(-u, axis=1, kind="stable")
        return j, _kuhn.perm_codes(self.N)[tuple(order.T)]

    def facet_distance(self, points):
        """Distance from each point to the boundary of its own simplex."""
        j, s = self.locate(points)
        p = np.asarray(points, dtype=float).reshape(-1, self.N)
        u = (p - self.origin) / self.H - j
        G, g0 = _kuhn.facets(self.N)
        d = np.einsum("mfn,mn->mf", G[s], u) + g0[s]
        return d.min(axis=1) * self.H


def triangulate(region: GridDomain, level: int, offset: bool = False) -> SimplicialMesh:
    """Kuhn triangulation of the region at refinement ``level`` (cube side h / 2^level)."""
    if not region.mask.any():
        raise EmptyDomainError("empty domain")
    if level < 0:
        raise LusinError("level must be non-negative")
    N = region.N
    f = 2**level
    H = region.h / f
    if not offset:
        counts = tuple(d * f for d in region.dims)
        cube = region.mask
        for ax in range(N):
            cube = np.repeat(cube, f, axis=ax)
        return SimplicialMesh(region, level, False, region.origin.copy(), H, cube)
    origin = region.origin - _kuhn.barycenter_offsets(N)[0] * H
    counts = tuple(d * f + 1 for d in region.dims)
    mesh = SimplicialMesh(region, level, True, origin, H, np.zeros(counts, dtype=bool))
    cube = mesh.cubes_within(region.mask)
    return SimplicialMesh(region, level, True, origin, H, cube)


# ----------------------------------------------------------------------------
# affine family
# ----------------------------------------------------------------------------


def interpolate(field: SampledVectorField, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolant of a node field, zero outside the node box."""
    dom = field.domain
    pts = np.asarray(points, dtype=float)
    shp = pts.shape[:-1]
    coords = ((pts.reshape(-1, dom.N) - dom.origin) / dom.h).T
    out = np.empty((coords.shape[1], dom.N))
    for c in range(dom.N):
        out[:, c] = map_coordinates(field.values[..., c], coords, order=1, mode="constant", cval=0.0)
    return out.reshape(shp + (dom.N,))


def oscillation_map(v2: SampledVectorField, mesh: SimplicialMesh, good_cells=None) -> np.ndarray:
    """Per-cube oscillation: max pairwise distance of v2 over simplex vertices and barycenter.

    Only cubes inside the mesh (and inside ``good_cells`` when given) count.
    """
    N = mesh.N
    vert_pts = np.stack(
        np.meshgrid(*[np.arange(c + 1) for c in mesh.counts], indexing="ij"), axis=-1
    )
    vert_vals = interpolate(v2, mesh.origin + vert_pts * mesh.H)
    bary_vals = interpolate(v2, mesh.barycenters())
    vo = _kuhn.vertex_offsets(N)
    out = np.zeros(mesh.counts)
    for s in range(vo.shape[0]):
        samples = []
        for m in range(N + 1):
            sl = tuple(slice(o, o + c) for o, c in zip(vo[s, m], mesh.counts))
            samples.append(vert_vals[sl])
        samples.append(bary_vals[..., s, :])
        for a in range(len(samples)):
            for b in range(a + 1, len(samples)):
                d = np.sqrt(np.sum((samples[a] - samples[b]) ** 2, axis=-1))
                np.maximum(out, d, out=out)
    keep = mesh.cube_mask
    if good_cells is not None:
        keep = keep & mesh.cubes_within(good_cells)
    return np.where(keep, out, 0.0)


def oscillation(v2: SampledVectorField, mesh: SimplicialMesh, good_cells=None) -> float:
    osc = oscillation_map(v2, mesh, good_cells)
    return float(osc.max()) if osc.size else 0.0


@dataclass(frozen=True, eq=False)
class AffineFamily:
    """psi_tau(x) = vbar_tau . (x - b_tau) on each simplex of ``mesh``."""

    mesh: SimplicialMesh
    vbar: np.ndarray

    def psi(self, points):
        """Value of the affine piece of the simplex containing each point."""
        p = np.asarray(points, dtype=float).reshape(-1, self.mesh.N)
        j, s = self.mesh.locate(p)
        counts = np.array(self.mesh.counts)
        inside = np.all((j >= 0) & (j < counts), axis=1)
        jc = np.clip(j, 0, counts - 1)
        vb = self.vbar[tuple(jc.T)][np.arange(len(s)), s] * inside[:, None]
        b = self.mesh.origin + (j + _kuhn.barycenter_offsets(self.mesh.N)[s]) * self.mesh.H
        return np.sum(vb * (p - b), axis=1), vb

    def sup_bound(self, r: float = 0.0) -> float:
        """sup of |psi_tau| over the r-dilation of tau, maximized over tau."""
        mags = np.sqrt(np.sum(self.vbar**2, axis=-1))
        if mags.size == 0:
            return 0.0
        return float(mags.max() * (_kuhn.barycenter_radius(self.mesh.N) * self.mesh.H + r))


def build_pl_potential(v2: SampledVectorField, mesh: SimplicialMesh, eta=None, good_cells=None) -> AffineFamily:
    """Constant gradient per simplex: vbar = interpolated v2 at the barycenter."""
    if eta is not None:
        osc = oscillation(v2, mesh, good_cells)
        if osc > eta / 2.0:
            raise BudgetError("oscillation budget unmet; refine")
    vbar = interpolate(v2, mesh.barycenters())
    vbar = vbar * mesh.cube_mask[..., None, None]
    return AffineFamily(mesh, vbar)


# ----------------------------------------------------------------------------
# tube and blend
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TubeSpec:
    """Open r-neighbourhood of the mesh skeleton with a certified measure bound.

    The bound sums, over simplices and their facets, the volume of the
    r-slab inside the simplex (at most r times the facet area), plus the outer
    strip along exposed faces.
    """

    r: float
    measure_bound: float
    skeleton_area: float


def tube_measure_bound(mesh: SimplicialMesh, r: float) -> float:
    per_cube = factorial(mesh.N) * _kuhn.facet_area_sum(mesh.N)
    return r * (mesh.n_cubes * per_cube + mesh.exposed_faces()) * mesh.H ** (mesh.N - 1)


def skeleton_tube(mesh: SimplicialMesh, eps: float, omega_measure: float) -> TubeSpec:
    """Halve r from just under the node clearance until the tube bound is <= eps * |Omega|."""
    if not eps > 0:
        raise LusinError("eps must be positive")
    r = 0.9 * _kuhn.node_clearance(mesh.N) * mesh.H
    for _ in range(200):
        bound = tube_measure_bound(mesh, r)
        if bound <= eps * omega_measure:
            return TubeSpec(r, bound, mesh.skeleton_area())
        r *= 0.5
    raise GridTooCoarseError("refine ambient grid")


def in_tube(mesh: SimplicialMesh, r: float, points) -> np.ndarray:
    """Points within r of a facet of their own simplex, near the included cubes."""
    p = np.asarray(points, dtype=float).reshape(-1, mesh.N)
    near = mesh.facet_distance(p) < r
    counts = np.array(mesh.counts)
    touched = np.zeros(p.shape[0], dtype=bool)
    for d in product((-1, 0, 1), repeat=mesh.N):
        q = p + np.array(d) * r
        j = np.floor((q - mesh.origin) / mesh.H).astype(np.int64)
        ok = np.all((j >= 0) & (j < counts), axis=1)
        jc = np.clip(j, 0, counts - 1)
        touched |= ok & mesh.cube_mask[tuple(jc.T)]
    return near & touched


def skeleton_crossings(potential, start, axis: int, length: float) -> np.ndarray:
    """Points where the segment ``start + t e_axis``, 0 <= t <= length, crosses a Kuhn hyperplane.

    Works for a single potential or a sum; facets lie on ``x_a = o_a + jH`` and
    ``x_a - x_b = o_a - o_b + jH``. Tubes are far thinner than any sampling step,
    so loop tests use these exact crossings.
    """
    terms = getattr(potential, "terms", (potential,))
    start = np.asarray(start, dtype=float)
    out = []
    for t in terms:
        o, H = t.origin, t.H
        a0, a1 = start[axis], start[axis] + length
        levels = [o[axis]] + [start[b] + o[axis] - o[b] for b in range(start.size) if b != axis]
        for lev in levels:
            j = np.arange(np.ceil((a0 - lev) / H), np.floor((a1 - lev) / H) + 1)
            x = np.tile(start, (j.size, 1))
            x[:, axis] = lev + j * H
            out.append(x)
    if not out:
        return np.zeros((0, start.size))
    return np.concatenate(out)


def segment_meets_tube(potential, start, axis: int, length: float) -> bool:
    pts = skeleton_crossings(potential, start, axis, length)
    return bool(pts.size and potential.near_skeleton(pts).any())


def blend(family: AffineFamily, mesh: SimplicialMesh, r: float, theta: float) -> EvaluablePotential:
    """Smooth partition-of-unity blend of the affine pieces."""
    if not r > 0:
        raise LusinError("blend radius must be positive")
    bound = family.sup_bound(r)
    if bound > theta:
        raise BudgetError(f"sup bound {bound:.3e} exceeds theta {theta:.3e}")
    return EvaluablePotential(mesh.origin, mesh.H, family.vbar, r, mesh.level)


# ----------------------------------------------------------------------------
# rough approximation
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoughCertificate:
    domain: GridDomain
    K_mask: np.ndarray
    phi: EvaluablePotential
    eps: float
    eta: float
    theta: float
    eps_achieved: float
    eta_achieved: float
    theta_achieved: float
    level: int
    r: float
    Lambda: float
    sigma: float
    oscillation: float
    B_mask: np.ndarray
    Bp_mask: np.ndarray
    S_mask: np.ndarray
    tube: TubeSpec

    @property
    def exceptional_cells(self) -> np.ndarray:
        return self.domain.mask & ~self.K_mask

    def shares(self) -> dict:
        m = measure(self.domain)
        return {
            "truncation": measure(self.domain, self.B_mask) / m,
            "repair": measure(self.domain, self.Bp_mask) / m,
            "shrink": measure(self.domain, self.S_mask) / m,
            "tube": self.tube.measure_bound / m,
        }


def node_residual(v: SampledVectorField, phi, nodes: np.ndarray) -> np.ndarray:
    """|v - grad phi| at the flagged nodes."""
    pts = v.domain.node_points()[nodes]
    if pts.size == 0:
        return np.zeros(0)
    g = phi.gradient(pts)
    return np.sqrt(np.sum((v.values[nodes] - g) ** 2, axis=-1))


def rough_approximate(
    v: SampledVectorField,
    eps: float,
    eta: float,
    theta: float,
    *,
    min_level: int = 0,
    max_level: int = 2,
    sigma_slack: float = 0.1,
    sigma_cap: float = 2.0,
    max_halvings: int = 60,
) -> RoughCertificate:
    """Compact set K and C1 potential phi with |Omega \\ K| <= eps|Omega|, |v - grad phi| <= eta on K, |phi| <= theta.

    The sigma search starts at ``min(choose_sigma(slack), sigma_cap * h)``.
    A mollifier narrower than the grid leaves v2 close to v at the nodes, so
    the residual left on K is far below eta and later iterations keep
    contracting; wide kernels stall on grid-scale roughness.
    """
    if not (eps > 0 and eta > 0 and theta > 0):
        raise LusinError("budgets must be positive")
    dom = v.domain
    total = measure(dom)
    if total == 0:
        raise EmptyDomainError("empty domain")
    share = eps * total / 4.0
    kappa = share
    tr = luzin_truncate(v, kappa)
    sigma = min(choose_sigma(dom, sigma_slack, floor=0.0), sigma_cap * dom.h)
    dom_nodes = dom.domain_nodes()

    for _ in range(max_halvings):
        v2 = mollify(tr.v1, sigma)
        dev = np.sqrt(np.sum((v.values - v2.values) ** 2, axis=-1))
        bad = dom_nodes & (dev > eta / 2.0)
        bad_cells = dom.mask & cells_touching(bad)
        core = interior_nodes(shrink(dom, sigma).mask)
        rest = bad_cells & ~tr.B_mask
        S = rest & cells_touching(bad & ~core)
        Bp = rest & ~S
        if measure(dom, Bp) < kappa and measure(dom, S) <= share:
            break
        sigma *= 0.5
    else:
        raise GridTooCoarseError("refine ambient grid")

    region = shrink(dom, 0.8 * sigma)
    if not region.mask.any():
        raise LusinError("sigma too large")
    exc = tr.B_mask | Bp | S
    clearance = _kuhn.node_clearance(dom.N)
    for level in range(min_level, max_level + 1):
        mesh = triangulate(region, level, offset=True)
        good = dom.mask & ~exc
        osc_map = oscillation_map(v2, mesh, good)
        family = build_pl_potential(v2, mesh)
        fits = family.sup_bound(clearance * mesh.H) <= theta / 2.0
        if osc_map.max() <= eta / 2.0 and fits:
            break
    else:
        if not fits:
            raise GridTooCoarseError("refine ambient grid")
        flagged = osc_map > eta / 2.0
        extra = np.zeros(dom.dims, dtype=bool)
        for j in np.argwhere(flagged):
            lo = np.floor((mesh.origin + j * mesh.H - dom.origin) / dom.h).astype(int)
            hi = np.ceil((mesh.origin + (j + 1) * mesh.H - dom.origin) / dom.h).astype(int)
            sl = tuple(slice(max(a, 0), max(b, 0)) for a, b in zip(lo, hi))
            extra[sl] = True
        Bp = Bp | (extra & dom.mask & ~tr.B_mask & ~S)
        if measure(dom, Bp) >= kappa:
            raise GridTooCoarseError("refine ambient grid")
        exc = tr.B_mask | Bp | S

    good = dom.mask & ~exc
    family = build_pl_potential(v2, mesh, eta, good_cells=good)
    osc = oscillation(v2, mesh, good)
    tube = skeleton_tube(mesh, eps / 4.0, total)
    phi = blend(family, mesh, tube.r, theta / 2.0)

    K = dom.mask & ~exc
    eps_ach = (measure(dom, exc) + tube.measure_bound) / total
    res = node_residual(v, phi, nodes_of_cells(K))
    eta_ach = float(res.max()) if res.size else 0.0
    theta_ach = phi.sup_bound()
    if eps_ach > eps or eta_ach > eta or theta_ach > theta:
        raise BudgetError(
            f"rough certificate violated: eps {eps_ach:.3e}/{eps:.3e}, eta {eta_ach:.3e}/{eta:.3e}, theta {theta_ach:.3e}/{theta:.3e}"
        )
    return RoughCertificate(
        domain=dom,
        K_mask=K,
        phi=phi,
        eps=eps,
        eta=eta,
        theta=theta,
        eps_achieved=eps_ach,
        eta_achieved=eta_ach,
        theta_achieved=theta_ach,
        level=mesh.level,
        r=tube.r,
        Lambda=tr.Lambda,
        sigma=sigma,
        oscillation=osc,
        B_mask=tr.B_mask,
        Bp_mask=Bp,
        S_mask=S,
        tube=tube,
    )
