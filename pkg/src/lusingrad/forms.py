"""Nearly exact 1-forms on the flat torus through a four-chart atlas and the gradient pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product

import numpy as np

from .errors import LusinError
from .field_core import GridDomain, SampledVectorField, ramp
from .pl_potential import segment_meets_tube
from .scheme import FinalCertificate, Schedule, run

CHART_HALF_WIDTH = 0.375
TRANSITION_HALF_WIDTH = 0.1


def multi_indices(m: int, k: int) -> tuple:
    """Strictly increasing k-tuples in 1..m."""
    if not 0 <= k <= m:
        raise LusinError("form degree must lie in [0, m]")
    return tuple(combinations(range(1, m + 1), k))


def _g(a: int, t):
    """1D partition on the circle: g_0 + g_1 = 1, g_a supported inside chart interval a."""
    t = np.mod(np.asarray(t, dtype=float), 1.0)
    w = TRANSITION_HALF_WIDTH
    g0 = np.where(t < 0.25, ramp(t / w), ramp((0.5 - t) / w))
    g0 = np.where(t > 0.75, ramp((t - 1.0) / w), g0)
    return g0 if a == 0 else 1.0 - g0


@dataclass(frozen=True)
class Chart:
    """Square chart of the torus with translation coordinates ``x - lo`` (mod 1)."""

    key: tuple
    lo: np.ndarray
    width: float

    def local(self, points) -> tuple:
        """Chart coordinates and a flag for points inside the open chart."""
        p = np.asarray(points, dtype=float)
        y = np.mod(p - self.lo, 1.0)
        inside = np.all((y > 0.0) & (y < self.width), axis=-1)
        return y, inside


@dataclass(frozen=True, eq=False)
class ChartAtlas:
    """Flat m-torus with 2^m translated square charts and a product partition of unity."""

    m: int
    n: int
    charts: tuple

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def torus_points(self) -> np.ndarray:
        ax = np.arange(self.n) * self.h
        return np.stack(np.meshgrid(*([ax] * self.m), indexing="ij"), axis=-1)

    def chi(self, i: int, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        key = self.charts[i].key
        out = np.ones(p.shape[:-1])
        for ax, a in enumerate(key):
            out = out * _g(a, p[..., ax])
        return out

    def overlaps(self) -> tuple:
        """Pairs of charts with nonempty intersection."""
        pairs = []
        for i, j in combinations(range(len(self.charts)), 2):
            ci, cj = self.charts[i], self.charts[j]
            d = np.mod(cj.lo - ci.lo + 0.5, 1.0) - 0.5
            if np.all(np.abs(d) < ci.width):
                pairs.append((i, j))
        return tuple(pairs)

    def chart_domain(self, i: int) -> GridDomain:
        c = self.charts[i]
        cells = int(round(c.width * self.n))
        return GridDomain(np.array(c.lo, dtype=float), self.h, np.ones((cells,) * self.m, dtype=bool))

    def chart_offset(self, i: int) -> np.ndarray:
        """Torus index of the chart's first node."""
        return np.rint(self.charts[i].lo * self.n).astype(np.int64)

    def check_cover(self):
        pts = self.torus_points()
        covered = np.zeros(pts.shape[:-1], dtype=bool)
        for c in self.charts:
            covered |= c.local(pts)[1]
        if not covered.all():
            raise LusinError("atlas does not cover manifold")


def torus_atlas(n: int, m: int = 2) -> ChartAtlas:
    """Charts centred at 1/4 and 3/4 on each axis; ``n`` must be a multiple of 8 for grid alignment."""
    if n % 8:
        raise LusinError("torus resolution must be a multiple of 8")
    charts = []
    for key in product((0, 1), repeat=m):
        centre = 0.25 + 0.5 * np.array(key, dtype=float)
        charts.append(Chart(key, centre - CHART_HALF_WIDTH, 2 * CHART_HALF_WIDTH))
    return ChartAtlas(m, n, tuple(charts))


@dataclass(frozen=True, eq=False)
class SampledForm:
    """k-form sampled at the nodes of a grid; ``values[..., l]`` is the coefficient of multi-index l."""

    m: int
    k: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        idx = multi_indices(self.m, self.k)
        if vals.ndim != self.m + 1 or vals.shape[-1] != len(idx):
            raise LusinError("coefficient array does not match the form degree")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def indices(self) -> tuple:
        return multi_indices(self.m, self.k)


@dataclass(frozen=True, eq=False)
class ChartForm:
    chart: int
    domain: GridDomain
    form: SampledForm


def localize(omega: SampledForm, atlas: ChartAtlas) -> list:
    """chi_i * omega pushed to chart coordinates; translations leave coefficients unchanged."""
    if omega.m != atlas.m or omega.values.shape[:-1] != (atlas.n,) * atlas.m:
        raise LusinError("form grid does not match the atlas")
    atlas.check_cover()
    out = []
    for i in range(len(atlas.charts)):
        dom = atlas.chart_domain(i)
        idx = (np.indices(dom.node_shape) + atlas.chart_offset(i).reshape((-1,) + (1,) * atlas.m)) % atlas.n
        coeff = omega.values[tuple(idx)]
        chi = atlas.chi(i, dom.node_points())
        # the partition vanishes on the chart edge, so the local form is compactly supported
        out.append(ChartForm(i, dom, SampledForm(omega.m, omega.k, coeff * chi[..., None])))
    return out


def reassemble(local: list, atlas: ChartAtlas) -> SampledForm:
    """Sum of the pullbacks of chart forms onto the torus grid."""
    if not local:
        raise LusinError("no chart forms")
    m, k = local[0].form.m, local[0].form.k
    acc = np.zeros((atlas.n,) * m + (local[0].form.values.shape[-1],))
    for cf in local:
        vals = cf.form.values
        idx = (np.indices(vals.shape[:-1]) + atlas.chart_offset(cf.chart).reshape((-1,) + (1,) * m)) % atlas.n
        flat = np.ravel_multi_index(tuple(i.reshape(-1) for i in idx), (atlas.n,) * m)
        np.add.at(acc.reshape(-1, acc.shape[-1]), flat, vals.reshape(-1, vals.shape[-1]))
    return SampledForm(m, k, acc)


@dataclass(frozen=True, eq=False)
class TorusPotential:
    """gamma = sum over charts of pulled-back potentials; each term vanishes near its chart edge."""

    atlas: ChartAtlas
    terms: tuple  # (chart index, potential)

    def value_and_grad(self, points):
        p = np.asarray(points, dtype=float)
        shp = p.shape[:-1]
        p = p.reshape(-1, self.atlas.m)
        val = np.zeros(p.shape[0])
        grad = np.zeros_like(p)
        for i, phi in self.terms:
            c = self.atlas.charts[i]
            y, inside = c.local(p)
            if not inside.any():
                continue
            a, b = phi.value_and_grad(c.lo + y[inside])
            val[inside] += a
            grad[inside] += b
        return val.reshape(shp), grad.reshape(shp + (self.atlas.m,))

    def value(self, points):
        return self.value_and_grad(points)[0]

    def near_skeleton(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, self.atlas.m)
        out = np.zeros(p.shape[0], dtype=bool)
        for i, phi in self.terms:
            c = self.atlas.charts[i]
            y, inside = c.local(p)
            if inside.any():
                out[inside] |= phi.near_skeleton(c.lo + y[inside])
        return out


def exterior_derivative(gamma: TorusPotential) -> SampledForm:
    """d gamma at the torus nodes from the analytic gradient (k = 1)."""
    _, g = gamma.value_and_grad(gamma.atlas.torus_points())
    return SampledForm(gamma.atlas.m, 1, g)


def exterior_derivative_fd(gamma: TorusPotential, h_fd: float) -> SampledForm:
    """Central-difference cross-check of ``exterior_derivative``."""
    pts = gamma.atlas.torus_points()
    m = gamma.atlas.m
    out = np.zeros(pts.shape)
    for ax in range(m):
        e = np.zeros(m)
        e[ax] = h_fd
        out[..., ax] = (gamma.value(pts + e) - gamma.value(pts - e)) / (2 * h_fd)
    return SampledForm(m, 1, out)


@dataclass(frozen=True, eq=False)
class FormCertificate:
    atlas: ChartAtlas
    gamma: TorusPotential
    A_cells: np.ndarray
    tube_bound: float
    measure_A_bound: float
    eps: float
    eps_prime: float
    tolerance: float
    residual_sup: float
    runs: tuple  # ((chart, multi-index), FinalCertificate)

    def in_A(self, points) -> np.ndarray:
        """Points in a flagged torus cell or in the blend zone of some chart potential."""
        p = np.mod(np.asarray(points, dtype=float).reshape(-1, self.atlas.m), 1.0)
        j = np.minimum(np.floor(p * self.atlas.n).astype(np.int64), self.atlas.n - 1)
        return self.A_cells[tuple(j.T)] | self.gamma.near_skeleton(p)


    def loop_meets_A(self, base, axis: int) -> bool:
        """Whether the closed loop ``base + t e_axis`` (t in [0, 1)) meets A.

        Flagged cells count when the loop lies in their closure; tube hits use
        exact facet crossings inside each chart.
        """
        m, n = self.atlas.m, self.atlas.n
        base = np.mod(np.asarray(base, dtype=float), 1.0)
        t = (np.arange(n) + 0.5) / n
        for shift in product(*[(0.0,) if a == axis else (-0.5, 0.5) for a in range(m)]):
            q = np.tile(base + np.array(shift) * 1e-9, (n, 1))
            q[:, axis] = t
            j = np.floor(np.mod(q, 1.0) * n).astype(np.int64) % n
            if self.A_cells[tuple(j.T)].any():
                return True
        for i, phi in self.gamma.terms:
            c = self.atlas.charts[i]
            y = np.mod(base - c.lo, 1.0)
            others = [a for a in range(m) if a != axis]
            if not all(0.0 < y[a] < c.width for a in others):
                continue
            start = c.lo + y
            start[axis] = c.lo[axis]
            if segment_meets_tube(phi, start, axis, c.width):
                return True
        return False


def _chart_cells_to_torus(atlas: ChartAtlas, i: int, mask: np.ndarray) -> np.ndarray:
    out = np.zeros((atlas.n,) * atlas.m, dtype=bool)
    idx = np.argwhere(mask) + atlas.chart_offset(i)
    out[tuple((idx % atlas.n).T)] = True
    return out


def nearly_exact(
    omega: SampledForm,
    atlas: ChartAtlas,
    eps: float,
    *,
    kappa: float = 1.0,
    eta: float = 0.5,
    n_max: int = 3,
    s: float = 0.0,
    max_halvings: int = 8,
    **inner,
) -> FormCertificate:
    """gamma with d gamma = omega off A and Vol(A) <= eps Vol(T^m); shipped for k = 1.

    Each coefficient b_l of chi_i omega becomes the vector field b_l e_l on chart i
    and is passed to the gradient iteration. The per-chart measure budget is
    halved until the measured union of pulled-back exceptional sets fits.
    """
    if omega.k != 1:
        raise LusinError("only 1-forms are implemented")
    if not eps > 0:
        raise LusinError("eps must be positive")
    local = localize(omega, atlas)
    n_runs = sum(cf.form.values.shape[-1] for cf in local)
    eps_prime = eps / n_runs
    for _ in range(max_halvings):
        runs = []
        terms = []
        A = np.zeros((atlas.n,) * atlas.m, dtype=bool)
        tubes = 0.0
        tol = 0.0
        for cf in local:
            for c, lam in enumerate(cf.form.indices):
                vals = np.zeros(cf.domain.node_shape + (atlas.m,))
                vals[..., lam[0] - 1] = cf.form.values[..., c]
                field = SampledVectorField(cf.domain, vals)
                try:
                    cert: FinalCertificate = run(field, Schedule(eps_prime, kappa / n_runs, eta, n_max, s), **inner)
                except LusinError as exc:
                    raise type(exc)(f"chart {cf.chart} index {lam}: {exc}") from exc
                runs.append(((cf.chart, lam), cert))
                terms.append((cf.chart, cert.phi_tilde))
                A |= _chart_cells_to_torus(atlas, cf.chart, cert.A_mask)
                tubes += sum(t.measure_bound for t in cert.tubes)
                tol += cert.residual_bound
        measure_A = float(A.sum()) * atlas.h**atlas.m + tubes
        if measure_A <= eps:
            break
        eps_prime *= 0.5
    else:
        raise LusinError("per-chart budget search did not reach the global budget")
    gamma = TorusPotential(atlas, tuple(terms))
    d_gamma = exterior_derivative(gamma)
    good = ~_touching_nodes(A)
    diff = np.sqrt(np.sum((d_gamma.values - omega.values) ** 2, axis=-1))
    residual = float(diff[good].max()) if good.any() else 0.0
    return FormCertificate(atlas, gamma, A, tubes, measure_A, eps, eps_prime, tol, residual, tuple(runs))


def _touching_nodes(cells: np.ndarray) -> np.ndarray:
    """Torus nodes that are a corner of some flagged cell (periodic)."""
    out = np.zeros_like(cells)
    for e in product((0, 1), repeat=cells.ndim):
        out |= np.roll(cells, shift=e, axis=tuple(range(cells.ndim)))
    return out


def fundamental_loops(atlas: ChartAtlas, axis: int = 0, samples_per_cell: int = 8) -> np.ndarray:
    """Closed straight loops along ``axis`` through every row of torus nodes, shape (loops, K, m)."""
    m, n = atlas.m, atlas.n
    t = np.arange(n * samples_per_cell) / (n * samples_per_cell)
    others = [np.arange(n) * atlas.h] * (m - 1)
    grid = np.stack(np.meshgrid(*others, indexing="ij"), axis=-1).reshape(-1, m - 1) if m > 1 else np.zeros((1, 0))
    loops = np.zeros((grid.shape[0], t.size, m))
    loops[..., axis] = t
    rest = [a for a in range(m) if a != axis]
    for k, a in enumerate(rest):
        loops[..., a] = grid[:, k : k + 1]
    return loops


def loop_integral(form_fn, loop: np.ndarray, axis: int) -> float:
    """Riemann sum of the ``axis`` component along a closed axis-parallel loop of unit length."""
    vals = form_fn(loop)
    return float(np.mean(vals[..., axis]))


def sample_form(omega_fn, atlas: ChartAtlas, m: int = 2) -> SampledForm:
    """Sample a callable 1-form (points -> coefficients) at the torus nodes."""
    return SampledForm(m, 1, omega_fn(atlas.torus_points()))
