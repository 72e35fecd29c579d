"""Truncation to a bounded field and mollification to a smooth, compactly supported one."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import ceil

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import EmptyDomainError, GridTooCoarseError, LusinError
from .field_core import (
    GridDomain,
    SampledVectorField,
    cells_touching,
    interior_nodes,
    measure,
    nodes_of_cells,
    shrink,
)

KERNEL_CUTOFF = 1e-14
# Kernel lattice spacing as a fraction of the kernel radius when the radius
# falls below the grid resolution.
FINE_LATTICE_RATIO = 2.5


@dataclass(frozen=True)
class TruncationResult:
    v1: SampledVectorField
    Lambda: float
    B_mask: np.ndarray
    Bp_mask: np.ndarray
    kappa: float


def cell_max(domain: GridDomain, node_values: np.ndarray) -> np.ndarray:
    """Max of a node scalar over the corners of each cell."""
    out = np.full(domain.dims, -np.inf)
    for e in product((0, 1), repeat=domain.N):
        sl = tuple(slice(o, o + d) for o, d in zip(e, domain.dims))
        out = np.maximum(out, node_values[sl])
    return out


def admissible_count(kappa: float, cell_volume: float) -> int:
    """Largest k with k * cell_volume < kappa."""
    k = max(int(ceil(kappa / cell_volume)) - 1, 0)
    while (k + 1) * cell_volume < kappa:
        k += 1
    while k > 0 and k * cell_volume >= kappa:
        k -= 1
    return k


def luzin_truncate(v: SampledVectorField, kappa: float) -> TruncationResult:
    """Clip |v| at the smallest sampled level whose exceedance set has measure < kappa.

    The exceedance predicate is per cell (max over corners). Over a finite
    sample set the minimal admissible level is an order statistic, so the
    search is exact rather than iterative.
    """
    if not kappa > 0:
        raise LusinError("kappa must be positive")
    dom = v.domain
    mag = v.magnitude()
    cmax = cell_max(dom, mag)
    vals = cmax[dom.mask]
    k = admissible_count(kappa, dom.cell_volume)
    if vals.size == 0 or k >= vals.size:
        lam = 0.0
    else:
        lam = float(np.sort(vals)[::-1][k])
    B = dom.mask & (cmax > lam)
    nodes = dom.domain_nodes() & (mag > lam)
    vals1 = np.array(v.values)
    if np.any(nodes):
        scale = np.where(nodes, lam / np.where(nodes, mag, 1.0), 1.0)
        vals1 = vals1 * scale[..., None]
    return TruncationResult(
        v1=v.replace(vals1),
        Lambda=lam,
        B_mask=B,
        Bp_mask=np.zeros(dom.dims, dtype=bool),
        kappa=float(kappa),
    )


@dataclass(frozen=True)
class MollifierKernel:
    """Stencil of the standard bump on a lattice of spacing ``h``; sum(weights) * h^N = 1."""

    a: float
    h: float
    offsets: np.ndarray
    weights: np.ndarray

    @property
    def N(self) -> int:
        return self.offsets.shape[1]

    def mass(self) -> float:
        return float(np.sum(self.weights) * self.h**self.N)

    def lipschitz_bound(self) -> float:
        """max_e sum_k |w_k - w_(k-e)| h^N / h over unit lattice shifts."""
        N = self.N
        m = int(np.abs(self.offsets).max()) + 1
        dense = np.zeros((2 * m + 1,) * N)
        dense[tuple((self.offsets + m).T)] = self.weights
        best = 0.0
        for ax in range(N):
            diff = np.abs(dense - np.roll(dense, 1, axis=ax)).sum()
            best = max(best, diff * self.h**N / self.h)
        return float(best)


def mollifier_kernel(a: float, h: float, dim: int = 2) -> MollifierKernel:
    if a < 2.0 * h * (1.0 - 1e-12):
        raise LusinError("kernel under-resolved")
    m = int(ceil(a / h))
    ax = np.arange(-m, m + 1)
    offs = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    rho2 = np.sum((offs * h) ** 2, axis=1) / (a * a)
    inside = rho2 < 1.0
    raw = np.zeros(rho2.shape)
    raw[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    keep = raw >= KERNEL_CUTOFF * raw.max()
    offs, raw = offs[keep], raw[keep]
    w = raw / (raw.sum() * h**dim)
    return MollifierKernel(float(a), float(h), offs, w)


def kernel_spacing(a: float, h: float) -> float:
    """Grid spacing when it resolves the kernel, else a finer lattice."""
    return h if a >= FINE_LATTICE_RATIO * h else a / FINE_LATTICE_RATIO


def _convolve(values: np.ndarray, kernel: MollifierKernel, h: float) -> np.ndarray:
    """sum_k w_k hk^N f_I(p + k hk) at every node p (f_I: multilinear interpolant, zero outside)."""
    N = kernel.N
    out = np.zeros_like(values)
    scale = kernel.h**N
    if kernel.h == h:
        m = int(np.abs(kernel.offsets).max())
        pad = np.pad(values, [(m, m)] * N + [(0, 0)])
        shape = values.shape[:N]
        for off, w in zip(kernel.offsets, kernel.weights):
            sl = tuple(slice(m + o, m + o + s) for o, s in zip(off, shape))
            out += (w * scale) * pad[sl]
        return out
    shape = values.shape[:N]
    base = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij"))
    ratio = kernel.h / h
    for off, w in zip(kernel.offsets, kernel.weights):
        coords = base + (off * ratio).reshape((N,) + (1,) * N)
        for c in range(values.shape[-1]):
            out[..., c] += (w * scale) * map_coordinates(values[..., c], coords, order=1, mode="constant", cval=0.0)
    return out


def mollify(v1: SampledVectorField, sigma: float) -> SampledVectorField:
    """Convolve v1 restricted to shrink(Omega, sigma) with the bump of radius sigma/10.

    Nodes that are not interior to shrink(Omega, 4 sigma / 5) are set to zero.
    """
    dom = v1.domain
    inner = shrink(dom, sigma)
    support = shrink(dom, 0.8 * sigma)
    if not inner.mask.any():
        raise LusinError("sigma too large")
    a = sigma / 10.0
    hk = kernel_spacing(a, dom.h)
    kernel = mollifier_kernel(a, hk, dom.N)
    f = v1.values * nodes_of_cells(inner.mask)[..., None]
    out = _convolve(f, kernel, dom.h)
    out *= interior_nodes(support.mask)[..., None]
    return v1.replace(out)


def choose_sigma(domain: GridDomain, slack: float, floor: float | None = None) -> float:
    """Largest sigma in a halving search with measure(shrink(Omega, 4 sigma/5)) >= (1 - slack) measure(Omega)."""
    if not 0.0 < slack < 1.0:
        raise LusinError("slack must lie in (0, 1)")
    total = measure(domain)
    if total == 0:
        raise EmptyDomainError("empty domain")
    floor = 2.0 * domain.h if floor is None else floor
    lo, hi = domain.bbox
    sigma = 0.5 * float(np.max(hi - lo))
    while measure(shrink(domain, 0.8 * sigma)) < (1.0 - slack) * total:
        sigma *= 0.5
        if sigma < floor or sigma == 0.0:
            raise GridTooCoarseError("grid too coarse")
    return sigma


def deviation_cells(domain: GridDomain, a: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    """Cells of the domain with a corner node where |a - b| > tol."""
    diff = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    return domain.mask & cells_touching(diff > tol)


def lipschitz_estimate(field: SampledVectorField) -> float:
    """Largest componentwise neighbour difference divided by h."""
    v = field.values
    best = 0.0
    for ax in range(field.domain.N):
        d = np.abs(np.diff(v, axis=ax))
        if d.size:
            best = max(best, float(d.max()))
    return best / field.domain.h
