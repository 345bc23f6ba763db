"""Explicit MPM with quadratic B-spline transfers (PIC or APIC).

Particles live in a :class:`ParticleSystem` of flat numpy arrays; the grid is a
dense uniform lattice whose nodes are addressed by a flat index
``(i * ny + j) * nz + k``. Scatter operations use ``np.bincount`` so serial
runs are deterministic.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .constitutive import MaterialLaw
from .exceptions import OutOfDomainError

log = logging.getLogger(__name__)

BSPLINE_DEGREE = 2
_OFFSETS = np.array([(a, b, c) for a in range(3) for b in range(3) for c in range(3)], dtype=np.int64)


@dataclass
class ParticleSystem:
    """Per-particle state. ``F`` is the elastic deformation gradient."""

    X: np.ndarray
    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    volume0: np.ndarray
    F: np.ndarray
    C: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    kappa: np.ndarray
    yield_stress: np.ndarray
    damaged: np.ndarray

    @classmethod
    def create(cls, X, mass, volume0, mu, lam, kappa=0.0, yield_stress=0.0, v=None):
        X = np.array(X, dtype=float)
        n = X.shape[0]

        def per_particle(a):
            return np.broadcast_to(np.asarray(a, dtype=float), (n,)).copy()

        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return cls(
            X=X,
            x=X.copy(),
            v=np.zeros((n, 3)) if v is None else np.broadcast_to(np.asarray(v, float), (n, 3)).copy(),
            mass=per_particle(mass),
            volume0=per_particle(volume0),
            F=eye,
            C=np.zeros((n, 3, 3)),
            tau=np.zeros((n, 3, 3)),
            mu=per_particle(mu),
            lam=per_particle(lam),
            kappa=per_particle(kappa),
            yield_stress=per_particle(yield_stress),
            damaged=np.zeros(n, dtype=bool),
        )

    def __len__(self):
        return self.x.shape[0]

    def copy(self) -> "ParticleSystem":
        return replace(self, **{k: getattr(self, k).copy() for k in self.__dataclass_fields__})

    def subset(self, idx) -> "ParticleSystem":
        return replace(self, **{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})

    def nbytes(self) -> int:
        return sum(getattr(self, k).nbytes for k in self.__dataclass_fields__)


@dataclass(frozen=True)
class HalfSpace:
    """Planar collider. Nodes with ``(x - point(t)) . normal < 0`` are inside.

    ``kind`` is ``sticky`` (node takes the collider velocity) or ``slip``
    (inward normal component relative to the collider is removed). The plane
    moves with ``velocity`` starting at ``start`` until ``stop``.
    """

    point: tuple
    normal: tuple
    kind: str = "sticky"
    velocity: tuple = (0.0, 0.0, 0.0)
    start: float = 0.0
    stop: float = np.inf

    def offset(self, t):
        active = min(max(t - self.start, 0.0), self.stop - self.start)
        return np.asarray(self.point, float) + active * np.asarray(self.velocity, float)

    def current_velocity(self, t):
        if self.start <= t < self.stop:
            return np.asarray(self.velocity, float)
        return np.zeros(3)


@dataclass(frozen=True)
class BoxRegion:
    """Dirichlet box: nodes inside get the prescribed velocity while active."""

    lo: tuple
    hi: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    start: float = 0.0
    stop: float = np.inf
    moving: bool = True

    def bounds(self, t):
        shift = 0.0
        if self.moving:
            shift = min(max(t - self.start, 0.0), self.stop - self.start)
        d = shift * np.asarray(self.velocity, float)
        return np.asarray(self.lo, float) + d, np.asarray(self.hi, float) + d


@dataclass
class Grid:
    origin: np.ndarray
    dx: float
    dims: tuple
    boundaries: list = field(default_factory=list)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(d) for d in self.dims)
        if not self.dx > 0:
            raise ValueError("grid spacing must be positive")

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def node_coords(self, flat):
        nx, ny, nz = self.dims
        flat = np.asarray(flat)
        i = flat // (ny * nz)
        j = (flat // nz) % ny
        k = flat % nz
        return np.stack([i, j, k], axis=-1)

    def node_positions(self, flat):
        return self.origin + self.dx * self.node_coords(flat)

    def nbytes(self) -> int:
        # mass + momentum + velocity + force per node
        return self.n_nodes * 8 * (1 + 3 + 3 + 3)


@dataclass
class SimConfig:
    dt: float
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.8, 0.0]))
    transfer: str = "apic"
    material: MaterialLaw = MaterialLaw()
    mass_epsilon: float = 0.0
    mu: object = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.transfer not in ("pic", "apic"):
            raise ValueError(f"unknown transfer scheme {self.transfer!r}")


def default_mass_epsilon(total_mass, grid: Grid) -> float:
    return 1e-12 * total_mass / grid.n_nodes


@dataclass
class Stencil:
    """Quadratic B-spline stencil: 27 nodes per particle."""

    flat: np.ndarray  # (n, 27) node indices
    w: np.ndarray  # (n, 27)
    dw: np.ndarray  # (n, 27, 3) gradient w.r.t. particle position
    dpos: np.ndarray  # (n, 27, 3) x_i - x_p


def _bspline_1d(fx):
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-2)
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], axis=-2)
    return w, dw


def bspline_weights(x, grid: Grid) -> Stencil:
    """Tensor-product quadratic B-spline weights and gradients.

    Raises :class:`OutOfDomainError` for particles closer than 1.5 cells to the
    grid boundary (their stencil would touch the outermost node layer).
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    rel = (x - grid.origin) / grid.dx
    base = np.floor(rel - 0.5).astype(np.int64)
    dims = np.asarray(grid.dims)
    bad = np.any((base < 1) | (base + 2 > dims - 2) | ~np.isfinite(rel), axis=1)
    if np.any(bad):
        idx = np.flatnonzero(bad)
        raise OutOfDomainError(f"{idx.size} particle(s) outside the safe grid region, first index {idx[0]}", idx)
    fx = rel - base
    w1, dw1 = _bspline_1d(fx)  # (n, 3 offsets, 3 axes)
    a, b, c = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wx, wy, wz = w1[:, a, 0], w1[:, b, 1], w1[:, c, 2]
    w = wx * wy * wz
    inv_dx = 1.0 / grid.dx
    dw = np.stack(
        [dw1[:, a, 0] * wy * wz, wx * dw1[:, b, 1] * wz, wx * wy * dw1[:, c, 2]], axis=-1
    ) * inv_dx
    node = base[:, None, :] + _OFFSETS[None, :, :]
    ny, nz = grid.dims[1], grid.dims[2]
    flat = (node[..., 0] * ny + node[..., 1]) * nz + node[..., 2]
    dpos = (node - rel[:, None, :]) * grid.dx
    return Stencil(flat=flat, w=w, dw=dw, dpos=dpos)


@dataclass
class GridState:
    mass: np.ndarray
    momentum: np.ndarray
    velocity: np.ndarray
    active: np.ndarray  # row indices of nodes with mass above epsilon
    node_ids: np.ndarray | None = None  # global flat index per row; None for the full grid

    def global_ids(self, rows):
        return rows if self.node_ids is None else self.node_ids[rows]


def _scatter(flat, values, n_nodes):
    if values.ndim == flat.ndim:
        return np.bincount(flat.ravel(), weights=values.ravel(), minlength=n_nodes)
    flat = flat.ravel()
    values = values.reshape(flat.size, -1)
    return np.stack(
        [np.bincount(flat, weights=values[:, d], minlength=n_nodes) for d in range(values.shape[1])], axis=-1
    )


def compact_stencil(st: Stencil, n_nodes: int):
    """Renumber stencil nodes to ``0..k-1`` in ascending global order.

    Returns ``(stencil, node_ids)`` so grid arrays can be sized to the nodes
    actually touched instead of the whole grid.
    """
    used = np.zeros(n_nodes, dtype=bool)
    used[st.flat] = True
    node_ids = np.flatnonzero(used)
    lookup = np.empty(n_nodes, dtype=np.int64)
    lookup[node_ids] = np.arange(node_ids.size)
    return replace(st, flat=lookup[st.flat]), node_ids


def p2g(
    ps: ParticleSystem, grid: Grid, cfg: SimConfig, stencil: Stencil | None = None, node_ids=None
) -> GridState:
    """Scatter particle mass and (affine) momentum to the grid.

    With ``node_ids`` the stencil must be compacted (see :func:`compact_stencil`)
    and the returned arrays have one row per listed node.
    """
    st = bspline_weights(ps.x, grid) if stencil is None else stencil
    n = grid.n_nodes if node_ids is None else len(node_ids)
    wm = st.w * ps.mass[:, None]
    mass = _scatter(st.flat, wm, n)
    p = np.broadcast_to(ps.v[:, None, :], st.dpos.shape)
    if cfg.transfer == "apic":
        p = p + np.einsum("pab,pib->pia", ps.C, st.dpos)
    momentum = _scatter(st.flat, wm[..., None] * p, n)
    active = np.flatnonzero(mass > cfg.mass_epsilon)
    velocity = np.zeros_like(momentum)
    velocity[active] = momentum[active] / mass[active][:, None]
    return GridState(mass=mass, momentum=momentum, velocity=velocity, active=active, node_ids=node_ids)


def grid_forces(ps: ParticleSystem, grid: Grid, stencil: Stencil | None = None, node_ids=None):
    """Internal nodal forces ``f_i = -sum_p V0_p tau_p grad w_ip``."""
    st = bspline_weights(ps.x, grid) if stencil is None else stencil
    f = -np.einsum("p,pab,pib->pia", ps.volume0, ps.tau, st.dw)
    return _scatter(st.flat, f, grid.n_nodes if node_ids is None else len(node_ids))


def _apply_boundaries(gs: GridState, grid: Grid, t: float):
    if not grid.boundaries or gs.active.size == 0:
        return
    nodes = gs.active
    pos = grid.node_positions(gs.global_ids(nodes))
    vel = gs.velocity[nodes]
    for bc in grid.boundaries:
        if isinstance(bc, HalfSpace):
            n = np.asarray(bc.normal, float)
            n = n / np.linalg.norm(n)
            inside = (pos - bc.offset(t)) @ n < 0.0
            if not np.any(inside):
                continue
            vc = bc.current_velocity(t)
            if bc.kind == "sticky":
                vel[inside] = vc
            else:
                rel = vel[inside] - vc
                vn = rel @ n
                rel = rel - np.minimum(vn, 0.0)[:, None] * n
                vel[inside] = vc + rel
        elif isinstance(bc, BoxRegion):
            lo, hi = bc.bounds(t)
            inside = np.all((pos >= lo) & (pos <= hi), axis=1)
            if bc.start <= t < bc.stop:
                vel[inside] = np.asarray(bc.velocity, float)
        else:
            raise TypeError(f"unsupported boundary descriptor {type(bc).__name__}")
    gs.velocity[nodes] = vel


def grid_update(gs: GridState, force, grid: Grid, cfg: SimConfig, t: float = 0.0) -> GridState:
    """Explicit velocity update on active nodes followed by boundary projection."""
    a = gs.active
    vel = gs.velocity.copy()
    if a.size:
        vel[a] = vel[a] + (cfg.dt / gs.mass[a][:, None]) * force[a] + cfg.dt * cfg.gravity
    out = GridState(mass=gs.mass, momentum=gs.momentum, velocity=vel, active=a, node_ids=gs.node_ids)
    _apply_boundaries(out, grid, t)
    return out


def g2p(
    gs: GridState,
    ps: ParticleSystem,
    grid: Grid,
    cfg: SimConfig,
    stencil: Stencil | None = None,
    update_material: bool = True,
) -> ParticleSystem:
    """Gather velocities, advect particles and evolve the elastic state."""
    st = bspline_weights(ps.x, grid) if stencil is None else stencil
    vi = gs.velocity[st.flat]  # (n, 27, 3)
    v = np.einsum("pi,pia->pa", st.w, vi)
    out = replace(ps, x=ps.x + cfg.dt * v, v=v)
    if cfg.transfer == "apic":
        scale = 12.0 / (grid.dx**2 * (BSPLINE_DEGREE + 1))
        out.C = scale * np.einsum("pi,pia,pib->pab", st.w, vi, st.dpos)
    else:
        out.C = np.zeros_like(ps.C)
    if not update_material:
        return out
    grad_v = np.einsum("pia,pib->pab", vi, st.dw)
    F_trial = ps.F + cfg.dt * grad_v @ ps.F
    det = np.linalg.det(F_trial)
    if np.any(det <= 0):
        log.warning("%d inverted particle(s) after F update", int(np.sum(det <= 0)))
    mu = np.where(ps.damaged, 0.0, ps.mu)
    lam = np.where(ps.damaged, 0.0, ps.lam)
    F_E, tau, tau_y, damaged = cfg.material.update(F_trial, mu, lam, ps.kappa, ps.yield_stress, cfg.dt)
    damaged = ps.damaged | damaged
    if np.any(damaged & ~ps.damaged):
        tau = tau.copy()
        tau[damaged] = 0.0
    out.F, out.tau, out.yield_stress, out.damaged = F_E, tau, tau_y, damaged
    return out


def check_cfl(ps: ParticleSystem, grid: Grid, cfg: SimConfig) -> bool:
    vmax = float(np.sqrt(np.max(np.einsum("pa,pa->p", ps.v, ps.v)))) if len(ps) else 0.0
    if cfg.dt * vmax >= grid.dx:
        warnings.warn(f"CFL violated: dt*max|v| = {cfg.dt * vmax:.3g} >= dx = {grid.dx:.3g}", RuntimeWarning)
        return False
    return True


def step(ps: ParticleSystem, grid: Grid, cfg: SimConfig, t: float = 0.0) -> ParticleSystem:
    """One explicit MPM step: P2G, forces, grid update, G2P."""
    check_cfl(ps, grid, cfg)
    st, nodes = compact_stencil(bspline_weights(ps.x, grid), grid.n_nodes)
    gs = p2g(ps, grid, cfg, st, nodes)
    f = grid_forces(ps, grid, st, nodes)
    gs = grid_update(gs, f, grid, cfg, t)
    return g2p(gs, ps, grid, cfg, st)


def kinetic_energy(ps: ParticleSystem) -> float:
    return 0.5 * float(np.sum(ps.mass * np.einsum("pa,pa->p", ps.v, ps.v)))


def angular_momentum(ps: ParticleSystem, grid: Grid, transfer: str = "apic"):
    """Total angular momentum about the origin including the APIC affine part.

    For quadratic B-splines the inertia-like tensor ``sum_i w (x_i-x_p)(x_i-x_p)^T``
    equals ``dx^2/4 I``, so each particle adds ``m dx^2/4 * axial(C^T - C)``.
    """
    L = np.cross(ps.x, ps.mass[:, None] * ps.v).sum(axis=0)
    if transfer == "apic":
        D = grid.dx**2 / 4.0
        C = ps.C
        axial = np.stack([C[:, 2, 1] - C[:, 1, 2], C[:, 0, 2] - C[:, 2, 0], C[:, 1, 0] - C[:, 0, 1]], axis=-1)
        L = L + D * (ps.mass[:, None] * axial).sum(axis=0)
    return L


class Simulator:
    """Stateful driver around :func:`step` that tracks simulation time."""

    def __init__(self, particles: ParticleSystem, grid: Grid, cfg: SimConfig):
        self.particles = particles
        self.grid = grid
        self.cfg = cfg
        self.time = 0.0
        self.n_steps = 0

    def step(self) -> ParticleSystem:
        self.particles = step(self.particles, self.grid, self.cfg, self.time)
        self.n_steps += 1
        self.time = self.n_steps * self.cfg.dt
        return self.particles

    def run(self, n_steps, callback=None):
        for _ in range(n_steps):
            self.step()
            if callback is not None:
                callback(self)
        return self.particles
