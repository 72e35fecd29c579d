"""Geometric-decay iteration that upgrades rough approximations to an exact-off-A potential."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, LusinError
from .field_core import (
    C0,
    GridDomain,
    NormReport,
    PotentialSum,
    SampledVectorField,
    measure,
    nodes_of_cells,
    norms,
)
from .pl_potential import RoughCertificate, rough_approximate


@dataclass(frozen=True)
class Schedule:
    delta: float
    kappa: float
    eta: float
    n_max: int = 6
    s: float = 0.0
    floor: float = 1e-12

    def __post_init__(self):
        if not (self.delta > 0 and self.kappa > 0 and self.eta > 0):
            raise LusinError("delta, kappa and eta must be positive")
        if self.s < 0:
            raise LusinError("extension slack s must be non-negative")
        if self.n_max < 1:
            raise LusinError("n_max must be at least 1")

    def eps_n(self, n: int) -> float:
        return 2.0 ** (-n - 1) * self.delta

    def eta_n(self, n: int) -> float:
        return 16.0 ** (-n) * self.eta

    def theta_n(self, n: int) -> float:
        return 2.0 ** (-n - 1) * self.kappa

    def eta_inner(self, n: int) -> float:
        """Accuracy requested from the inner oracle; tighter than eta_n only at n = 0."""
        return min(16.0 ** (-n), 4.0 ** (-n - 1)) * self.eta

    def clamp_bound(self, n: int) -> float:
        return (1.0 + self.s) * 8.0 ** (-n) * self.eta

    def decay_bound(self, j: int) -> float:
        return (1.0 + self.s) * 4.0 ** (-j) * self.eta


@dataclass(frozen=True)
class StepRecord:
    n: int
    eps_n: float
    eta_n: float
    theta_n: float
    eta_inner: float
    not_K_fraction: float
    phi_Z_bound: float
    phi_Z: float
    phi_Y: float
    pre_clamp_sup: float
    pre_clamp_off_K_sup: float
    clamp_bound: float
    post_clamp_sup: float
    intersection_residual: float
    decay_bound: float
    clamp_active: bool
    level: int
    r: float
    Lambda: float
    sigma: float


@dataclass(eq=False)
class IterationState:
    n: int
    v_n: SampledVectorField
    K_masks: list = field(default_factory=list)
    certs: list = field(default_factory=list)
    phis: list = field(default_factory=list)
    intersection: np.ndarray | None = None
    records: list = field(default_factory=list)

    @classmethod
    def start(cls, v: SampledVectorField) -> "IterationState":
        return cls(0, v, intersection=v.domain.mask.copy())


def clamp_extend(raw: np.ndarray, beta: float, K_mask: np.ndarray, s: float = 0.0) -> np.ndarray:
    """Identity on the nodes of K, radial clamp to length beta elsewhere."""
    raw = np.asarray(raw, dtype=float)
    on_K = nodes_of_cells(K_mask)
    mag = np.sqrt(np.sum(raw**2, axis=-1))
    if on_K.any() and mag[on_K].max() > beta / (1.0 + s):
        raise BudgetError("inner accuracy not met")
    scale = np.ones_like(mag)
    over = (~on_K) & (mag > beta)
    scale[over] = beta / mag[over]
    out = raw.copy()
    out[over] = raw[over] * scale[over][:, None]
    return out


def step(state: IterationState, schedule: Schedule, *, norm_oversample: int = 2, **inner) -> IterationState:
    """One pass: rough approximation of the current residual, then clamp-extension."""
    n = state.n
    v_n = state.v_n
    dom = v_n.domain
    try:
        cert: RoughCertificate = rough_approximate(
            v_n, schedule.eps_n(n), schedule.eta_inner(n), schedule.theta_n(n), **inner
        )
    except LusinError as exc:
        raise type(exc)(f"step {n}: {exc}") from exc
    phi = cert.phi
    pts = dom.node_points()
    grad = phi.gradient(pts.reshape(-1, dom.N)).reshape(v_n.values.shape)
    raw = v_n.values - grad
    beta = schedule.clamp_bound(n)
    on_K = nodes_of_cells(cert.K_mask)
    mag = np.sqrt(np.sum(raw**2, axis=-1))
    dom_nodes = dom.domain_nodes()
    off = dom_nodes & ~on_K
    try:
        new_vals = clamp_extend(raw, beta, cert.K_mask, schedule.s)
    except BudgetError as exc:
        raise BudgetError(f"step {n}: {exc}", state) from exc
    inter = state.intersection & cert.K_mask
    new = v_n.replace(new_vals)
    inter_nodes = nodes_of_cells(inter)
    new_mag = new.magnitude()
    rep = norms(phi, dom, oversample=norm_oversample)
    rec = StepRecord(
        n=n,
        eps_n=schedule.eps_n(n),
        eta_n=schedule.eta_n(n),
        theta_n=schedule.theta_n(n),
        eta_inner=schedule.eta_inner(n),
        not_K_fraction=cert.eps_achieved,
        phi_Z_bound=cert.theta_achieved,
        phi_Z=rep.sup_norm,
        phi_Y=rep.c1_norm,
        pre_clamp_sup=float(mag[dom_nodes].max()),
        pre_clamp_off_K_sup=float(mag[off].max()) if off.any() else 0.0,
        clamp_bound=beta,
        post_clamp_sup=float(new_mag[dom_nodes].max()),
        intersection_residual=float(new_mag[inter_nodes].max()) if inter_nodes.any() else 0.0,
        decay_bound=schedule.decay_bound(n + 1),
        clamp_active=bool(np.any(off & (mag > beta))),
        level=cert.level,
        r=cert.r,
        Lambda=cert.Lambda,
        sigma=cert.sigma,
    )
    return IterationState(
        n=n + 1,
        v_n=new,
        K_masks=state.K_masks + [cert.K_mask],
        certs=state.certs + [cert],
        phis=state.phis + [phi],
        intersection=inter,
        records=state.records + [rec],
    )


@dataclass(frozen=True, eq=False)
class FinalCertificate:
    domain: GridDomain
    schedule: Schedule
    A_mask: np.ndarray
    tubes: tuple
    phi_tilde: PotentialSum
    n_final: int
    measure_A_bound: float
    residual_sup: float
    residual_bound: float
    Z_norm: float
    Z_bound: float
    Y_norm: float
    Y_bound: float
    partial_Y: tuple
    v_X: float
    records: tuple

    def checks(self) -> dict:
        m = measure(self.domain)
        return {
            "measure_A": self.measure_A_bound <= self.schedule.delta * m,
            "residual": self.residual_sup <= self.residual_bound,
            "Z_norm": self.Z_norm <= self.schedule.kappa and self.Z_bound <= self.schedule.kappa,
            "Y_norm": self.Y_norm <= self.Y_bound,
            "partial_Y": all(p <= self.Y_bound for p in self.partial_Y),
        }


def run(v: SampledVectorField, schedule: Schedule, *, norm_oversample: int = 2, **inner) -> FinalCertificate:
    """Iterate until n_max or until the residual on the running intersection drops below the floor."""
    dom = v.domain
    state = IterationState.start(v)
    while state.n < schedule.n_max:
        state = step(state, schedule, norm_oversample=norm_oversample, **inner)
        if state.records[-1].intersection_residual < schedule.floor * schedule.eta:
            break
    inter = state.intersection
    A = dom.mask & ~inter
    tubes = tuple(c.tube for c in state.certs)
    measure_A = measure(dom, A) + sum(t.measure_bound for t in tubes)
    phi_tilde = PotentialSum(tuple(state.phis))
    nodes = nodes_of_cells(inter)
    pts = dom.node_points()[nodes]
    if pts.size:
        g = phi_tilde.gradient(pts)
        residual = float(np.sqrt(np.sum((v.values[nodes] - g) ** 2, axis=-1)).max())
    else:
        residual = 0.0
    rep: NormReport = norms(phi_tilde, dom, oversample=norm_oversample)
    v_X = norms(v, dom).x_norm
    partial = tuple(np.cumsum([r.phi_Y for r in state.records]).tolist())
    return FinalCertificate(
        domain=dom,
        schedule=schedule,
        A_mask=A,
        tubes=tubes,
        phi_tilde=phi_tilde,
        n_final=state.n,
        measure_A_bound=measure_A,
        residual_sup=residual,
        residual_bound=schedule.decay_bound(state.n),
        Z_norm=rep.sup_norm,
        Z_bound=phi_tilde.sup_bound(),
        Y_norm=rep.c1_norm,
        Y_bound=C0 * (v_X + schedule.eta / 2.0 + schedule.kappa),
        partial_Y=partial,
        v_X=v_X,
        records=tuple(state.records),
    )
