"""Latent-space dynamics: infer particle state from the fields, advance a small
set of particles with one exact MPM step and pull the latent code forward by
inverting the deformation field on the sample particles.

The fields are accessed through a small protocol so the same runtime drives
trained networks (:class:`NeuralFields`) or stored full-order data
(:class:`OracleFields`)::

    positions(idx, z)          -> (n, 3)
    position_jacobian(idx, z)  -> (n, 3, r)
    stress(idx, z)             -> (n, 3, 3)
    affine(idx, z)             -> (n, 3, 3)
    encode(frame)              -> (r,)
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .dataset import TrajectoryDataset, to_voigt
from .exceptions import ModelCorruptionError, ParameterDomainError, ShapeError, WellPosednessError
from .mpm import (
    Grid,
    ParticleSystem,
    SimConfig,
    bspline_weights,
    compact_stencil,
    grid_forces,
    grid_update,
    p2g,
)

log = logging.getLogger(__name__)

TIKHONOV = 1e-12


class ConditioningWarning(RuntimeWarning):
    pass


def min_samples(latent_dim: int) -> int:
    return math.ceil(latent_dim / 3)


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ModelCorruptionError(f"{name} field produced non-finite values")
    return arr


class NeuralFields:
    """Adapter exposing fitted estimators through the field protocol."""

    def __init__(self, deformation, stress, affine, mu=None):
        self.g, self.h, self.l = deformation, stress, affine
        self.reference = deformation.reference_ if hasattr(deformation, "reference_") else None
        self.mu = mu
        self.latent_dim = deformation.latent_dim

    def with_reference(self, X):
        self.reference = np.asarray(X, dtype=float)
        return self

    def positions(self, idx, z):
        return _finite("deformation", self.g.predict(self.reference[idx], np.asarray(z, dtype=float)))

    def position_jacobian(self, idx, z):
        return _finite("deformation", self.g.latent_jacobian(self.reference[idx], z))

    def stress(self, idx, z):
        return self.h.predict(self.reference[idx], np.asarray(z, dtype=float), self.mu)

    def affine(self, idx, z):
        return self.l.predict(self.reference[idx], np.asarray(z, dtype=float), self.mu)

    def encode(self, frame):
        return self.g.encode(np.asarray(frame, dtype=float)[None])[0]


class OracleFields:
    """Stored full-order frames behind the field protocol.

    The latent is one number ``s``, a fractional frame index. Positions are
    interpolated linearly between stored frames; stress and affine matrices
    are taken from the nearest frame. With ``initial_velocity`` a virtual
    frame ``-1 = x0 - dt v0`` is prepended so the backward-difference velocity
    is available at ``s = 0``.
    """

    latent_dim = 1

    def __init__(self, dataset: TrajectoryDataset, initial_velocity=None, dt=None):
        self.dataset = dataset
        self.reference = dataset.reference
        pos = dataset.positions
        self.first = 0
        if initial_velocity is not None:
            dt = dataset.dt if dt is None else dt
            pos = np.concatenate([(pos[0] - dt * np.asarray(initial_velocity))[None], pos])
            self.first = -1
        self._pos = pos
        self._tau = dataset.stress_tensors()
        self._C = dataset.affine_tensors()
        self.n_frames = dataset.n_frames

    def _segment(self, s):
        s = float(np.asarray(s).reshape(-1)[0])
        k = int(np.clip(np.floor(s), self.first, self.n_frames - 2))
        return k - self.first, s - k

    def positions(self, idx, z):
        k, a = self._segment(z)
        x0 = self._pos[k, idx]
        if a == 0.0:
            return x0.copy()
        return x0 + a * (self._pos[k + 1, idx] - x0)

    def position_jacobian(self, idx, z):
        k, _ = self._segment(z)
        return (self._pos[k + 1, idx] - self._pos[k, idx])[:, :, None]

    def _nearest(self, z):
        s = float(np.asarray(z).reshape(-1)[0])
        return int(np.clip(np.rint(s), 0, self.n_frames - 1))

    def stress(self, idx, z):
        return self._tau[self._nearest(z), idx]

    def affine(self, idx, z):
        return self._C[self._nearest(z), idx]

    def encode(self, frame):
        d = np.sum((self.dataset.positions - np.asarray(frame)[None]) ** 2, axis=(1, 2))
        return np.array([float(np.argmin(d))])


# --- sample and integration sets -------------------------------------------------


def select_sample_particles(n_particles, count, strategy="uniform", seed=0, regions=None, latent_dim=None):
    """Pick sample particle indices (sorted).

    ``strategy="uniform"`` draws without replacement from all particles.
    ``strategy="regions"`` takes ``regions = [(mask, count), ...]`` and draws
    the given number of particles inside each boolean mask, which expresses
    heuristics such as clustering samples toward part of the body.
    """
    rng = np.random.default_rng(seed)
    if latent_dim is not None and count < min_samples(latent_dim):
        raise WellPosednessError(f"{count} sample particles cannot determine a {latent_dim}-dimensional latent (need {min_samples(latent_dim)})")
    if count > n_particles:
        raise ParameterDomainError(f"cannot sample {count} particles out of {n_particles}")
    if count < 1:
        raise ParameterDomainError("sample count must be positive")
    if strategy == "uniform":
        return np.sort(rng.choice(n_particles, size=count, replace=False))
    if strategy == "regions":
        if not regions:
            raise ParameterDomainError("region strategy needs (mask, count) pairs")
        if sum(c for _, c in regions) != count:
            raise ParameterDomainError("region counts must add up to the sample count")
        picked = []
        for mask, c in regions:
            pool = np.flatnonzero(np.asarray(mask, dtype=bool))
            if c > pool.size:
                raise ParameterDomainError(f"region holds {pool.size} particles, {c} requested")
            picked.append(rng.choice(pool, size=c, replace=False))
        return np.unique(np.concatenate(picked))
    raise ParameterDomainError(f"unknown sampling strategy '{strategy}'")


_CORNERS = np.array([(a, b, c) for a in range(3) for b in range(3) for c in range(3)])


def integration_set(sample_positions, all_positions, grid: Grid):
    """Nodes ``I`` touched by the sample particles and particles ``N`` that touch ``I``.

    A particle belongs to ``N`` when it has nonzero quadratic weight on some
    node of ``I``. Returns ``(I, N)`` as sorted index arrays.
    """
    st = bspline_weights(sample_positions, grid)
    I = np.unique(st.flat[st.w > 0])
    marked = np.zeros(grid.n_nodes, dtype=bool)
    marked[I] = True
    # cheap pre-filter on the 3x3x3 block of each particle, exact weights after
    rel = (np.asarray(all_positions) - grid.origin) / grid.dx
    base = np.floor(rel - 0.5).astype(np.int64)
    ny, nz = grid.dims[1], grid.dims[2]
    dims = np.asarray(grid.dims)
    inside = np.all((base >= 0) & (base + 2 < dims), axis=1)
    cand = np.flatnonzero(inside)
    b = base[cand]
    flat = ((b[:, None, 0] + _CORNERS[:, 0]) * ny + b[:, None, 1] + _CORNERS[:, 1]) * nz + b[:, None, 2] + _CORNERS[:, 2]
    cand = cand[marked[flat].any(axis=1)]
    st_c = bspline_weights(all_positions[cand], grid)
    hit = (marked[st_c.flat] & (st_c.w > 0)).any(axis=1)
    return I, cand[hit]


def integration_set_from_fields(S, z, fields, grid: Grid):
    all_x = fields.positions(slice(None), z)
    return integration_set(all_x[S], all_x, grid)


# --- state inference and the reduced step ----------------------------------------


@dataclass
class InferredState:
    x: np.ndarray
    v: np.ndarray
    tau: np.ndarray
    C: np.ndarray


def infer_states(z, z_prev, idx, fields, dt):
    """Particle state on ``idx``: positions, backward-difference velocities,
    stress and affine matrices."""
    x = fields.positions(idx, z)
    x_prev = fields.positions(idx, z_prev)
    tau = _finite("stress", fields.stress(idx, z))
    C = _finite("affine", fields.affine(idx, z))
    return InferredState(x=x, v=(x - x_prev) / dt, tau=tau, C=C)


def reduced_step(state: InferredState, template: ParticleSystem, N, S_local, grid: Grid, cfg: SimConfig, t=0.0):
    """One MPM step over the integration particles; returns new positions of ``S``.

    ``state`` holds the inferred quantities for the particles ``N`` (in that
    order), ``template`` supplies per-particle mass and volume for all
    particles and ``S_local`` gives the rows of ``N`` that are sample
    particles. Forces use the inferred stress directly, so no return map is
    evaluated.
    """
    ps = ParticleSystem(
        X=template.X[N],
        x=state.x,
        v=state.v,
        mass=template.mass[N],
        volume0=template.volume0[N],
        F=template.F[N],
        C=state.C if cfg.transfer == "apic" else np.zeros_like(state.C),
        tau=state.tau,
        mu=template.mu[N],
        lam=template.lam[N],
        kappa=template.kappa[N],
        yield_stress=template.yield_stress[N],
        damaged=template.damaged[N],
    )
    st, nodes = compact_stencil(bspline_weights(ps.x, grid), grid.n_nodes)
    gs = p2g(ps, grid, cfg, st, nodes)
    f = grid_forces(ps, grid, st, nodes)
    gs = grid_update(gs, f, grid, cfg, t)
    vi = gs.velocity[st.flat[S_local]]
    v = np.einsum("pi,pia->pa", st.w[S_local], vi)
    return ps.x[S_local] + cfg.dt * v


# --- Gauss-Newton inversion -----------------------------------------------------


@dataclass(frozen=True)
class InversionConfig:
    max_iterations: int = 5
    tolerance: float = 1e-10
    damping: bool = False
    max_halvings: int = 10
    linearized: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParameterDomainError("max_iterations must be at least 1")


@dataclass
class InversionResult:
    z: np.ndarray
    residual: float  # ||g(X_S, z) - target|| / ||target||
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def invert_deformation(targets, S, z_init, fields, cfg: InversionConfig = InversionConfig()):
    """Least-squares latent for target sample positions by Gauss-Newton.

    Solves ``min_z sum_p |g(X_p, z) - x_p|^2`` over ``p in S`` starting from
    ``z_init``. Without damping the iteration stops as soon as a step would
    increase the residual and the best iterate is returned; with damping the
    step is halved until it decreases the residual.
    """
    targets = np.asarray(targets, dtype=float)
    S = np.asarray(S)
    r = fields.latent_dim
    if S.size < min_samples(r):
        raise WellPosednessError(f"|S| = {S.size} < ceil(r/3) = {min_samples(r)}: latent is not determined")
    if targets.shape != (S.size, 3):
        raise ShapeError(f"targets must be ({S.size}, 3), got {targets.shape}")
    scale = float(np.linalg.norm(targets)) or 1.0
    z = np.array(z_init, dtype=float).reshape(r)
    res = (fields.positions(S, z) - targets).ravel()
    err = float(np.linalg.norm(res))
    history = [err / scale]
    iters = 0
    max_iter = 1 if cfg.linearized else cfg.max_iterations
    while iters < max_iter and history[-1] >= cfg.tolerance:
        J = fields.position_jacobian(S, z).reshape(-1, r)
        A = J.T @ J + TIKHONOV * np.eye(r)
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e14:
            warnings.warn(f"normal matrix is ill-conditioned (cond={cond:.3g})", ConditioningWarning, stacklevel=2)
        dz = -np.linalg.solve(A, J.T @ res)
        iters += 1
        step = 1.0
        for _ in range(cfg.max_halvings + 1 if cfg.damping else 1):
            z_new = z + step * dz
            res_new = (fields.positions(S, z_new) - targets).ravel()
            err_new = float(np.linalg.norm(res_new))
            if err_new <= err or cfg.linearized:
                break
            step *= 0.5
        if err_new > err and not cfg.linearized:
            log.debug("Gauss-Newton step rejected at iteration %d", iters)
            break
        z, res, err = z_new, res_new, err_new
        history.append(err / scale)
    return InversionResult(z=z, residual=err / scale, iterations=iters, converged=history[-1] < cfg.tolerance, history=history)


# --- rollout ------------------------------------------------------------------------


class SampleSchedule:
    """Piecewise-constant sample sets: ``[(first_step, indices), ...]``."""

    def __init__(self, entries):
        if isinstance(entries, np.ndarray) or (entries and np.isscalar(entries[0])):
            entries = [(0, entries)]
        self.entries = sorted(((int(s), np.sort(np.asarray(i, dtype=np.int64))) for s, i in entries), key=lambda e: e[0])
        if not self.entries or self.entries[0][0] != 0:
            raise ParameterDomainError("sample schedule must start at step 0")

    def at(self, n):
        current = self.entries[0][1]
        for start, idx in self.entries:
            if start <= n:
                current = idx
        return current

    def check(self, latent_dim):
        for _, idx in self.entries:
            if idx.size < min_samples(latent_dim):
                raise WellPosednessError(f"|S| = {idx.size} < ceil(r/3) = {min_samples(latent_dim)}")


BOOTSTRAP_INVERSION = InversionConfig(max_iterations=20, tolerance=0.0)


def bootstrap(fields, x0, v0, S, dt, cfg: InversionConfig = BOOTSTRAP_INVERSION):
    """Initial latents ``(z0, z_prev)`` from the first frame and its velocity.

    Errors in ``z_prev`` act as a velocity perturbation that persists through
    the rollout, so the default solve iterates until the residual stops
    decreasing rather than stopping at the rollout tolerance.
    """
    S = np.asarray(S)
    z0 = fields.encode(x0)
    z0 = invert_deformation(np.asarray(x0)[S], S, z0, fields, cfg).z
    prev = np.asarray(x0)[S] - dt * np.asarray(v0)[S]
    z_prev = invert_deformation(prev, S, z0, fields, cfg).z
    return z0, z_prev


@dataclass
class RolloutResult:
    latents: np.ndarray  # (steps + 1, r)
    frames: np.ndarray | None  # decoded positions (steps + 1, P, 3)
    residuals: np.ndarray
    iterations: np.ndarray
    flags: np.ndarray  # True where inversion did not reach tolerance
    n_integration: np.ndarray
    n_samples: np.ndarray
    timings: dict

    def to_dataset(self, fields, mu=(), dt=0.0, dx=0.0) -> TrajectoryDataset:
        """Decode stress and affine for all particles and package the frames."""
        P = fields.reference.shape[0]
        every = np.arange(P)
        frames = self.frames
        if frames is None:
            frames = np.stack([fields.positions(every, z) for z in self.latents])
        tau = np.stack([to_voigt(fields.stress(every, z)) for z in self.latents])
        C = np.stack([fields.affine(every, z).reshape(P, 9) for z in self.latents])
        return TrajectoryDataset(fields.reference, frames, tau, C, mu=mu, dt=dt, dx=dx)


def rollout(fields, template: ParticleSystem, grid: Grid, cfg: SimConfig, steps, samples, z0, z_prev,
            inversion: InversionConfig = InversionConfig(), decode=True, t0=0.0):
    """Advance the latent code ``steps`` times.

    Each step infers the state on the integration particles, runs one MPM step
    on them and inverts the deformation field on the new sample positions.
    ``samples`` is an index array or a :class:`SampleSchedule`; the
    integration set is rebuilt every step.
    """
    schedule = samples if isinstance(samples, SampleSchedule) else SampleSchedule(samples)
    schedule.check(fields.latent_dim)
    r = fields.latent_dim
    every = np.arange(template.x.shape[0])
    timings = defaultdict(float)
    latents = [np.asarray(z0, dtype=float).reshape(r)]
    z, zp = latents[0], np.asarray(z_prev, dtype=float).reshape(r)
    frames = []
    residuals, iterations, flags, n_int, n_smp = [], [], [], [], []
    t_start = time.perf_counter()
    for n in range(steps):
        S = schedule.at(n)
        tic = time.perf_counter()
        all_x = fields.positions(every, z)
        timings["inference"] += time.perf_counter() - tic
        if decode:
            frames.append(all_x)
        tic = time.perf_counter()
        _, N = integration_set(all_x[S], all_x, grid)
        S_local = np.searchsorted(N, S)
        timings["integration_set"] += time.perf_counter() - tic
        tic = time.perf_counter()
        state = infer_states(z, zp, N, fields, cfg.dt)
        timings["inference"] += time.perf_counter() - tic
        tic = time.perf_counter()
        x_new = reduced_step(state, template, N, S_local, grid, cfg, t0 + n * cfg.dt)
        timings["mpm"] += time.perf_counter() - tic
        tic = time.perf_counter()
        inv = invert_deformation(x_new, S, z, fields, inversion)
        timings["inversion"] += time.perf_counter() - tic
        if not inv.converged:
            log.debug("step %d: inversion residual %.3e after %d iterations", n, inv.residual, inv.iterations)
        zp, z = z, inv.z
        latents.append(z)
        residuals.append(inv.residual)
        iterations.append(inv.iterations)
        flags.append(not inv.converged)
        n_int.append(N.size)
        n_smp.append(S.size)
    if decode:
        tic = time.perf_counter()
        frames.append(fields.positions(every, z))
        timings["inference"] += time.perf_counter() - tic
    timings["total"] = time.perf_counter() - t_start
    return RolloutResult(
        latents=np.array(latents),
        frames=np.array(frames) if decode else None,
        residuals=np.array(residuals),
        iterations=np.array(iterations, dtype=int),
        flags=np.array(flags, dtype=bool),
        n_integration=np.array(n_int, dtype=int),
        n_samples=np.array(n_smp, dtype=int),
        timings=dict(timings),
    )
