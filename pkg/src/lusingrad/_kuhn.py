"""Kuhn simplex geometry on the unit cube.

The simplex for a permutation ``p`` is ``1 >= u[p0] >= u[p1] >= ... >= u[p(N-1)] >= 0``.
Its facets lie on hyperplanes of the form ``x_i = k`` or ``x_i - x_j = k``.
"""

from functools import lru_cache
from itertools import permutations
from math import factorial, sqrt

import numpy as np


@lru_cache(maxsize=None)
def perms(n):
    return tuple(permutations(range(n)))


@lru_cache(maxsize=None)
def perm_codes(n):
    """Lookup array: descending-order tuple of a point's local coordinates -> index in ``perms(n)``."""
    codes = np.full((n,) * n, -1, dtype=np.int64)
    for i, perm in enumerate(perms(n)):
        codes[perm] = i
    codes.setflags(write=False)
    return codes


@lru_cache(maxsize=None)
def barycenter_offsets(n):
    """(N!, N) barycenters in unit-cube coordinates."""
    out = np.zeros((factorial(n), n))
    for s, p in enumerate(perms(n)):
        for k, axis in enumerate(p):
            out[s, axis] = (n - k) / (n + 1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def vertex_offsets(n):
    """(N!, N+1, N) integer vertex offsets of every simplex in its cube."""
    out = np.zeros((factorial(n), n + 1, n), dtype=np.int64)
    for s, p in enumerate(perms(n)):
        for m in range(1, n + 1):
            out[s, m] = out[s, m - 1]
            out[s, m, p[m - 1]] = 1
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def facets(n):
    """Unit inward normals G (N!, N+1, N) and offsets g0 (N!, N+1).

    Signed distance (cube units) of local coordinate u to facet f is ``G[s, f] @ u + g0[s, f]``.
    """
    G = np.zeros((factorial(n), n + 1, n))
    g0 = np.zeros((factorial(n), n + 1))
    c = 1.0 / sqrt(2.0)
    for s, p in enumerate(perms(n)):
        G[s, 0, p[0]] = -1.0
        g0[s, 0] = 1.0
        for k in range(1, n):
            G[s, k, p[k - 1]] = c
            G[s, k, p[k]] = -c
        G[s, n, p[n - 1]] = 1.0
    G.setflags(write=False)
    g0.setflags(write=False)
    return G, g0


def node_clearance(n):
    """Distance (cube units) from a simplex barycenter to the nearest arrangement hyperplane."""
    return 1.0 / ((n + 1) * sqrt(2.0))


def facet_area_sum(n):
    """Sum of facet areas of one Kuhn simplex, in units of H**(N-1)."""
    return (2.0 + (n - 1) * sqrt(2.0)) / factorial(n - 1)


@lru_cache(maxsize=None)
def barycenter_radius(n):
    """Largest barycenter-to-vertex distance, cube units."""
    b = barycenter_offsets(n)[0]
    v = vertex_offsets(n)[0]
    return float(np.max(np.linalg.norm(v - b, axis=1)))
