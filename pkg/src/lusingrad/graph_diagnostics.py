"""Graph area, tangent-plane transversality and projected measures of a sampled graph."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import _kuhn
from .errors import LusinError
from .field_core import SampledVectorField, discrete_jacobian

POWER_TOL = 1e-10
POWER_MAX_ITER = 20000


@dataclass(frozen=True)
class GraphSample:
    """Point of the graph with its tangent basis ``[I; J]`` (columns span the tangent plane)."""

    x: np.ndarray
    value: np.ndarray
    tangent: np.ndarray

    @property
    def plane(self) -> "PlaneSpec":
        return PlaneSpec.from_basis(self.tangent)


def graph_samples(v2: SampledVectorField) -> list:
    dom = v2.domain
    jac = discrete_jacobian(v2)
    pts = dom.node_points()
    eye = np.eye(dom.N)
    out = []
    for idx in np.argwhere(dom.domain_nodes()):
        i = tuple(idx)
        out.append(GraphSample(pts[i], v2.values[i], np.vstack([eye, jac[i]])))
    return out


@dataclass(frozen=True, eq=False)
class PlaneSpec:
    """An N-plane in R^(2N), stored as its orthogonal projection matrix."""

    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        n2 = P.shape[0]
        if P.shape != (n2, n2) or n2 % 2:
            raise LusinError("projection must be a square matrix of even size")
        if np.abs(P - P.T).max() > 1e-10 or np.abs(P @ P - P).max() > 1e-10:
            raise LusinError("not an orthogonal projection")
        if abs(np.trace(P) - n2 // 2) > 1e-8:
            raise LusinError("projection rank must be N")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def N(self) -> int:
        return self.P.shape[0] // 2

    @classmethod
    def from_basis(cls, B) -> "PlaneSpec":
        q, _ = np.linalg.qr(np.asarray(B, dtype=float))
        P = q @ q.T
        return cls(0.5 * (P + P.T))

    @classmethod
    def horizontal(cls, N: int) -> "PlaneSpec":
        return cls(np.diag([1.0] * N + [0.0] * N))

    @classmethod
    def vertical(cls, N: int) -> "PlaneSpec":
        return cls(np.diag([0.0] * N + [1.0] * N))

    @classmethod
    def tilted(cls, N: int, angle: float, axis: int = 0) -> "PlaneSpec":
        """Horizontal plane with base axis ``axis`` rotated by ``angle`` toward fibre axis ``axis``."""
        B = np.vstack([np.eye(N), np.zeros((N, N))])
        B[axis, axis] = np.cos(angle)
        B[N + axis, axis] = np.sin(angle)
        return cls.from_basis(B)

    def basis(self) -> np.ndarray:
        """Orthonormal basis of the plane obtained by projecting the horizontal axes."""
        q, _ = np.linalg.qr(self.P[:, : self.N])
        return q


def _power_norm(D: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> np.ndarray:
    """Operator norm of each matrix in a stack, by power iteration on D^T D."""
    D = np.asarray(D, dtype=float)
    M = np.einsum("...ki,...kj->...ij", D, D)
    shape = M.shape[:-2]
    M = M.reshape((-1,) + M.shape[-2:])
    n = M.shape[-1]
    # Fixed start vector with every component nonzero, so no eigenvector is missed generically.
    x = np.tile(np.linspace(1.0, 2.0, n) / np.sqrt(np.sum(np.linspace(1.0, 2.0, n) ** 2)), (M.shape[0], 1))
    lam = np.zeros(M.shape[0])
    active = np.ones(M.shape[0], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        y = np.einsum("mij,mj->mi", M[active], x[active])
        lam_new = np.einsum("mi,mi->m", x[active], y)
        nrm = np.sqrt(np.sum(y * y, axis=-1))
        resid = np.sqrt(np.sum((y - lam_new[:, None] * x[active]) ** 2, axis=-1))
        zero = nrm == 0.0
        xn = np.where(zero[:, None], x[active], y / np.where(zero, 1.0, nrm)[:, None])
        idx = np.flatnonzero(active)
        x[idx] = xn
        lam[idx] = lam_new
        active[idx[(resid <= tol) | zero]] = False
    return np.sqrt(np.clip(lam, 0.0, None)).reshape(shape)


def plane_distance(a: PlaneSpec, b: PlaneSpec) -> float:
    """Operator norm of the difference of the two projections."""
    return float(min(_power_norm(a.P - b.P), 1.0))


def _graph_projections(jac: np.ndarray) -> np.ndarray:
    """Projections onto the graph planes spanned by ``[I; J]`` for a stack of Jacobians."""
    N = jac.shape[-1]
    eye = np.broadcast_to(np.eye(N), jac.shape)
    B = np.concatenate([eye, jac], axis=-2)
    G = np.einsum("...ki,...kj->...ij", B, B)
    return B @ np.linalg.solve(G, np.swapaxes(B, -1, -2))


def transversality_gap(v2: SampledVectorField) -> float:
    """Minimum over domain nodes of the distance between the graph tangent plane and the vertical plane."""
    dom = v2.domain
    jac = discrete_jacobian(v2)[dom.domain_nodes()]
    if jac.shape[0] == 0:
        raise LusinError("empty domain")
    P = _graph_projections(jac)
    V = PlaneSpec.vertical(dom.N).P
    return float(np.min(np.minimum(_power_norm(P - V), 1.0)))


def graph_area(v2: SampledVectorField) -> float:
    """Midpoint rule for the integral of sqrt(1 + |Dv|_F^2) over the domain cells.

    The Jacobian at a cell centre is the mean of the edge differences along
    each axis, which is exact for the multilinear interpolant.
    """
    dom = v2.domain
    v = v2.values
    N = dom.N
    jac = np.zeros(dom.dims + (N, N))
    for ax in range(N):
        d = np.diff(v, axis=ax) / dom.h
        acc = np.zeros(dom.dims + (N,))
        others = [a for a in range(N) if a != ax]
        for e in product((0, 1), repeat=N - 1):
            sl = [slice(None)] * N
            sl[ax] = slice(0, dom.dims[ax])
            for a, o in zip(others, e):
                sl[a] = slice(o, o + dom.dims[a])
            acc += d[tuple(sl)]
        jac[..., :, ax] = acc / 2 ** (N - 1)
    integrand = np.sqrt(1.0 + np.sum(jac**2, axis=(-2, -1)))
    return float(integrand[dom.mask].sum() * dom.cell_volume)


@dataclass(frozen=True)
class ProjectedMeasure:
    measure: float
    raster_cell: float
    covered: int
    resolution: int


def projected_measure(
    v2: SampledVectorField,
    plane: PlaneSpec,
    resolution: int | None = None,
    gap: float | None = None,
) -> ProjectedMeasure:
    """Measure of the projection of the sampled graph onto ``plane`` by rasterization.

    The graph over each cell is split into Kuhn simplices; a raster cell counts
    when its centre lies in some projected simplex. ``resolution`` defaults to
    four times the longest grid side.
    """
    dom = v2.domain
    N = dom.N
    if plane.N != N:
        raise LusinError("plane dimension does not match the field")
    eps0 = transversality_gap(v2) if gap is None else gap
    if plane_distance(plane, PlaneSpec.horizontal(N)) >= eps0:
        raise LusinError("not a graph over plane")
    res = 4 * max(dom.dims) if resolution is None else int(resolution)
    if res < 1:
        raise LusinError("resolution must be positive")
    E = plane.basis()
    graph_pts = np.concatenate([dom.node_points(), v2.values], axis=-1)
    proj = graph_pts @ E
    cells = np.argwhere(dom.mask)
    vo = _kuhn.vertex_offsets(N)
    simp = []
    for s in range(vo.shape[0]):
        idx = cells[:, None, :] + vo[s][None]
        simp.append(proj[tuple(np.moveaxis(idx, -1, 0))])
    simp = np.concatenate(simp)
    used = np.zeros(dom.node_shape, dtype=bool)
    for e in product((0, 1), repeat=N):
        used[tuple(cells[:, a] + e[a] for a in range(N))] = True
    lo = proj[used].min(axis=0)
    hi = proj[used].max(axis=0)
    size = np.where(hi > lo, (hi - lo) / res, 1.0)
    T = np.swapaxes(simp[:, 1:] - simp[:, :1], -1, -2)
    det = np.linalg.det(T)
    keep = np.abs(det) > 1e-300
    simp, T = simp[keep], T[keep]
    Tinv = np.linalg.inv(T)
    s_lo = np.floor((simp.min(axis=1) - lo) / size - 0.5).astype(np.int64)
    s_hi = np.ceil((simp.max(axis=1) - lo) / size - 0.5).astype(np.int64)
    span = (s_hi - s_lo).max(axis=0) + 1
    covered = np.zeros((res,) * N, dtype=bool)
    for off in product(*[range(int(k)) for k in span]):
        j = s_lo + np.array(off)
        ok = np.all((j >= 0) & (j < res) & (j <= s_hi), axis=1)
        if not ok.any():
            continue
        c = lo + (j[ok] + 0.5) * size
        lam = np.einsum("mij,mj->mi", Tinv[ok], c - simp[ok, 0])
        inside = np.all(lam >= -1e-12, axis=1) & (lam.sum(axis=1) <= 1.0 + 1e-12)
        hit = j[ok][inside]
        covered[tuple(hit.T)] = True
    vol = float(np.prod(size))
    n = int(np.count_nonzero(covered))
    return ProjectedMeasure(n * vol, vol, n, res)
