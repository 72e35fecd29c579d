"""Named analytic test fields sampled on a grid."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .field_core import GridDomain, SampledVectorField

BUMP_RADIUS_FRACTION = 0.4


def _bump(domain: GridDomain, pts):
    """exp(1 - 1/(1 - |x-c|^2/R^2)) centred in the bbox, R = 0.4 * shortest side; with its gradient."""
    lo, hi = domain.bbox
    c = 0.5 * (lo + hi)
    R = BUMP_RADIUS_FRACTION * float(np.min(hi - lo))
    d = pts - c
    q = np.sum(d * d, axis=-1) / (R * R)
    inside = q < 1.0
    b = np.zeros(q.shape)
    db = np.zeros(pts.shape)
    qi = q[inside]
    bi = np.exp(1.0 - 1.0 / (1.0 - qi))
    b[inside] = bi
    # d/dx exp(1 - 1/(1-q)) = b * (-1/(1-q)^2) * dq/dx, dq/dx = 2 d / R^2
    db[inside] = (bi * (-1.0 / (1.0 - qi) ** 2))[:, None] * (2.0 * d[inside] / (R * R))
    return b, db, d


def zero(domain: GridDomain, **_) -> SampledVectorField:
    return SampledVectorField(domain, np.zeros(domain.node_shape + (domain.N,)))


def constant(domain: GridDomain, value=None, **_) -> SampledVectorField:
    value = np.ones(domain.N) if value is None else np.asarray(value, dtype=float)
    if value.shape != (domain.N,):
        raise ConfigError("constant value must have N components")
    return SampledVectorField(domain, np.broadcast_to(value, domain.node_shape + (domain.N,)))


def sine_bump_potential(domain: GridDomain, pts, amplitude=1e-3):
    """g = A sin(2 pi x1) sin(2 pi x2) * bump and its gradient (2D product extended by 1 in higher axes)."""
    b, db, _ = _bump(domain, pts)
    s1 = np.sin(2 * np.pi * pts[..., 0])
    s2 = np.sin(2 * np.pi * pts[..., 1])
    c1 = np.cos(2 * np.pi * pts[..., 0])
    c2 = np.cos(2 * np.pi * pts[..., 1])
    p = s1 * s2
    dp = np.zeros(pts.shape)
    dp[..., 0] = 2 * np.pi * c1 * s2
    dp[..., 1] = 2 * np.pi * s1 * c2
    g = amplitude * p * b
    dg = amplitude * (dp * b[..., None] + p[..., None] * db)
    return g, dg


def gradient_of_sine_bump(domain: GridDomain, amplitude=1e-3, **_) -> SampledVectorField:
    _, dg = sine_bump_potential(domain, domain.node_points(), amplitude)
    return SampledVectorField(domain, dg)


def rotational_bump(domain: GridDomain, amplitude=1.0, **_) -> SampledVectorField:
    """bump * (-(x2 - c2), x1 - c1, 0, ...): curl-carrying, compactly supported."""
    pts = domain.node_points()
    b, _, d = _bump(domain, pts)
    v = np.zeros(pts.shape)
    v[..., 0] = -d[..., 1] * b
    v[..., 1] = d[..., 0] * b
    return SampledVectorField(domain, amplitude * v)


def random_trigonometric(domain: GridDomain, seed=None, amplitude=1.0, modes=4, **_) -> SampledVectorField:
    """Sum of random low-frequency sines/cosines per component, drawn from ``seed``."""
    if seed is None:
        raise ConfigError("seed is mandatory for generated random fields")
    rng = np.random.default_rng(int(seed))
    pts = domain.node_points()
    lo, hi = domain.bbox
    y = (pts - lo) / (hi - lo)
    v = np.zeros(pts.shape)
    for c in range(domain.N):
        for _ in range(int(modes)):
            k = rng.integers(1, 5, size=domain.N)
            phase = rng.uniform(0, 2 * np.pi)
            coef = rng.normal() / int(modes)
            v[..., c] += coef * np.sin(2 * np.pi * (y @ k) + phase)
    return SampledVectorField(domain, amplitude * v)


GENERATORS = {
    "zero": zero,
    "constant": constant,
    "gradient-of-sine-bump": gradient_of_sine_bump,
    "rotational-bump": rotational_bump,
    "random-trigonometric": random_trigonometric,
}


def generate(name: str, domain: GridDomain, **params) -> SampledVectorField:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise ConfigError(f"unknown generator {name!r}") from None
    return fn(domain, **params)
