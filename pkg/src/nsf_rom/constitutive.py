"""Finite-strain elasticity and elastoplastic return mappings.

Every routine is vectorised over leading batch axes: a deformation gradient
may be a single ``(3, 3)`` matrix or an ``(n, 3, 3)`` stack. Moduli may be
scalars or per-particle arrays broadcastable against the batch shape.

The plastic models work on principal log-strains ``eps = log(sigma)`` of the
rotation-safe SVD ``F = U diag(sigma) V^T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    InvertedElementError,
    LogDomainError,
    NumericError,
    ParameterDomainError,
)

DIM = 3
PLASTIC_MODELS = ("none", "drucker_prager", "von_mises", "herschel_bulkley")


@dataclass(frozen=True)
class ElasticParams:
    youngs_modulus: float
    poisson_ratio: float
    shear_modulus: float
    lame_modulus: float
    bulk_modulus: float


@dataclass(frozen=True)
class PlasticParams:
    """Plasticity parameters.

    ``yield_stress`` is the von Mises ``tau_Y`` or the Herschel-Bulkley
    ``sigma_Y`` depending on ``model``. Angles are in radians.
    """

    model: str = "none"
    friction_angle: float = math.radians(30.0)
    yield_stress: float = 0.0
    hardening: float = 0.0
    softening: float = 0.0
    viscosity: float = 0.0

    def __post_init__(self):
        if self.model not in PLASTIC_MODELS:
            raise ParameterDomainError(f"unknown plastic model {self.model!r}")
        if self.model == "drucker_prager" and not 0.0 < self.friction_angle < math.pi / 2:
            raise ParameterDomainError("friction angle must lie in (0, pi/2)")
        if self.yield_stress < 0:
            raise ParameterDomainError("yield stress must be non-negative")
        if self.viscosity < 0:
            raise ParameterDomainError("viscosity must be non-negative")

    @property
    def alpha(self) -> float:
        """Drucker-Prager cone coefficient."""
        s = math.sin(self.friction_angle)
        return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def lame_from_E_nu(E: float, nu: float) -> ElasticParams:
    if not E > 0:
        raise ParameterDomainError(f"Young's modulus must be positive, got {E}")
    if not 0.0 <= nu < 0.5:
        raise ParameterDomainError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    kappa = E / (3.0 * (1.0 - 2.0 * nu))
    return ElasticParams(float(E), float(nu), mu, lam, kappa)


def svd3(M):
    """Rotation-safe SVD of one or many 3x3 matrices.

    Returns ``(U, sigma, V)`` with ``det(U) = det(V) = +1`` and singular values
    in descending magnitude; a negative determinant of ``M`` shows up as a
    negative last entry of ``sigma``.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) input, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("svd3 received non-finite entries")
    U, sigma, Vt = np.linalg.svd(M)
    V = np.swapaxes(Vt, -1, -2).copy()
    sigma = sigma.copy()
    for R in (U, V):
        flip = np.where(np.linalg.det(R) < 0.0, -1.0, 1.0)
        R[..., :, 2] *= flip[..., None]
        sigma[..., 2] *= flip
    return U, sigma, V


def _compose(U, diag, V):
    return np.einsum("...ij,...j,...kj->...ik", U, diag, V)


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _as_moduli(ep):
    if isinstance(ep, ElasticParams):
        return ep.shear_modulus, ep.lame_modulus, ep.bulk_modulus
    return ep


def kirchhoff_fixed_corotated(F_E, ep, check=True):
    """Kirchhoff stress ``2 mu (F - R) F^T + lam (J - 1) J I``.

    ``ep`` is an :class:`ElasticParams` or a ``(mu, lam, ...)`` tuple of
    scalars/arrays. With ``check=False`` inverted elements are tolerated.
    """
    mu, lam = _as_moduli(ep)[:2]
    U, sigma, V = svd3(F_E)
    J = np.prod(sigma, axis=-1)
    if check and np.any(J <= 0):
        raise InvertedElementError("fixed corotated stress needs det(F) > 0")
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    # (F - R) F^T = U (sigma^2 - sigma) U^T
    tau = 2.0 * mu[..., None, None] * _compose(U, sigma * sigma - sigma, U)
    tau = tau + (lam * (J - 1.0) * J)[..., None, None] * np.eye(3)
    return _sym(tau)


def _log_strain(sigma, min_singular):
    if min_singular is None:
        if np.any(sigma <= 0):
            raise LogDomainError("log-strain requires positive singular values")
        return np.log(sigma)
    return np.log(np.maximum(sigma, min_singular))


def hencky_principal_stress(eps, mu, lam):
    """Principal Kirchhoff stress of the Hencky (log-strain StVK) model."""
    mu = np.asarray(mu, dtype=float)[..., None]
    lam = np.asarray(lam, dtype=float)[..., None]
    return 2.0 * mu * eps + lam * eps.sum(axis=-1, keepdims=True)


def kirchhoff_stvk(F_E, ep, min_singular=None):
    """Kirchhoff stress of StVK on Hencky strain, ``U (2 mu eps + lam tr(eps)) U^T``.

    The principal stresses are mapped back with the left rotation on both
    sides so the result is the symmetric Kirchhoff tensor.
    """
    mu, lam = _as_moduli(ep)[:2]
    U, sigma, _ = svd3(F_E)
    eps = _log_strain(sigma, min_singular)
    return _sym(_compose(U, hencky_principal_stress(eps, mu, lam), U))


# ---------------------------------------------------------------------------
# principal-space projections (array level, used by the simulator)


def _deviator(eps):
    tr = eps.sum(axis=-1, keepdims=True)
    dev = eps - tr / DIM
    return tr[..., 0], dev, np.linalg.norm(dev, axis=-1)


def drucker_prager_project(eps, mu, lam, alpha):
    """Project principal log-strains onto the Drucker-Prager cone."""
    eps = np.asarray(eps, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), eps.shape[:-1])
    lam = np.broadcast_to(np.asarray(lam, dtype=float), eps.shape[:-1])
    tr, dev, dev_norm = _deviator(eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        dgamma = dev_norm + alpha * (DIM * lam + 2.0 * mu) * tr / (2.0 * mu)
        scale = np.where(dev_norm > 0, dgamma / dev_norm, 0.0)
    out = eps.copy()
    plastic = (tr <= 0) & (dgamma > 0)
    out[plastic] = eps[plastic] - scale[plastic, None] * dev[plastic]
    out[tr > 0] = 0.0
    return out


def von_mises_project(eps, mu, yield_stress):
    """Radial return of principal log-strains; returns ``(eps_E, dgamma)``."""
    eps = np.asarray(eps, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), eps.shape[:-1])
    tau_y = np.broadcast_to(np.asarray(yield_stress, dtype=float), eps.shape[:-1])
    _, dev, dev_norm = _deviator(eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        dgamma = dev_norm - tau_y / (2.0 * mu)
    plastic = (dgamma > 0) & (dev_norm > 0) & (mu > 0)
    dgamma = np.where(plastic, dgamma, 0.0)
    out = eps.copy()
    out[plastic] -= (dgamma[plastic] / dev_norm[plastic])[:, None] * dev[plastic]
    return out, dgamma


def herschel_bulkley_project(sigma, mu, yield_stress, viscosity, dt, newton_iters=30):
    """Viscoplastic relaxation of the isochoric left stretch.

    Works on principal stretches ``sigma``; returns the projected stretches and
    the principal values of the projected unimodular ``b^E``. The volume ratio
    ``J`` is preserved and the deviatoric magnitude of ``mu * dev(b_bar)`` is
    set exactly to the relaxed value.
    """
    sigma = np.asarray(sigma, dtype=float)
    shape = sigma.shape[:-1]
    mu = np.broadcast_to(np.asarray(mu, dtype=float), shape)
    sigma_y = np.broadcast_to(np.asarray(yield_stress, dtype=float), shape)
    J = np.prod(sigma, axis=-1)
    b_bar = sigma**2 * np.abs(J)[..., None] ** (-2.0 / 3.0)
    mean = b_bar.mean(axis=-1, keepdims=True)
    dev = b_bar - mean
    s_trial = mu * np.linalg.norm(dev, axis=-1)
    s_yield = math.sqrt(2.0 / 3.0) * sigma_y
    with np.errstate(divide="ignore", invalid="ignore"):
        relax = 1.0 / (1.0 + viscosity / (2.0 * mu * dt))
        s_new = s_trial - (s_trial - s_yield) * relax
        t = np.where(s_trial > 0, s_new / s_trial, 1.0)
    plastic = (s_trial > s_yield) & (mu > 0)
    if not np.any(plastic):
        return sigma.copy(), b_bar
    t = np.where(plastic, t, 1.0)[..., None]
    # a I + t dev(b_bar) with unit determinant; f(a) is increasing for the root we want
    a = mean.copy()
    scaled = t * dev
    for _ in range(newton_iters):
        terms = a + scaled
        f = np.prod(terms, axis=-1, keepdims=True) - 1.0
        df = (
            terms[..., 1:2] * terms[..., 2:3]
            + terms[..., 0:1] * terms[..., 2:3]
            + terms[..., 0:1] * terms[..., 1:2]
        )
        step = f / df
        a = a - step
        if np.all(np.abs(step) <= 1e-15 * np.abs(a)):
            break
    b_new = np.where(plastic[..., None], a + scaled, b_bar)
    sigma_new = np.where(
        plastic[..., None],
        np.sqrt(b_new) * np.abs(J)[..., None] ** (1.0 / 3.0) * np.sign(sigma),
        sigma,
    )
    return sigma_new, b_new


def herschel_bulkley_stress(U, sigma, mu, kappa):
    """``kappa/2 (J^2 - 1) I + mu dev[det(b)^(-1/3) b]`` from the principal frame."""
    J = np.prod(sigma, axis=-1)
    b = sigma**2
    b_bar = b * np.abs(np.prod(b, axis=-1, keepdims=True)) ** (-1.0 / 3.0)
    dev = b_bar - b_bar.mean(axis=-1, keepdims=True)
    mu = np.asarray(mu, dtype=float)[..., None]
    kappa = np.asarray(kappa, dtype=float)
    tau = _compose(U, mu * dev, U)
    tau = tau + (0.5 * kappa * (J * J - 1.0))[..., None, None] * np.eye(3)
    return _sym(tau)


# ---------------------------------------------------------------------------
# matrix-level return maps


def _check_det(F):
    if np.any(np.linalg.det(F) <= 0):
        raise InvertedElementError("return mapping requires det(F_trial) > 0")


def return_map_drucker_prager(F_trial, ep: ElasticParams, pp: PlasticParams, min_singular=None):
    F_trial = np.asarray(F_trial, dtype=float)
    _check_det(F_trial)
    U, sigma, V = svd3(F_trial)
    eps = _log_strain(sigma, min_singular)
    eps_e = drucker_prager_project(eps, ep.shear_modulus, ep.lame_modulus, pp.alpha)
    return _compose(U, np.exp(eps_e), V)


def return_map_von_mises(F_trial, ep: ElasticParams, pp: PlasticParams, yield_stress=None, min_singular=None):
    """Von Mises radial return on Hencky strain.

    ``yield_stress`` overrides ``pp.yield_stress`` with the caller's current
    (possibly hardened) value. Returns ``(F_E, dgamma)``; particles inside the
    yield surface come back unchanged with ``dgamma = 0``.
    """
    F_trial = np.asarray(F_trial, dtype=float)
    _check_det(F_trial)
    tau_y = pp.yield_stress if yield_stress is None else yield_stress
    U, sigma, V = svd3(F_trial)
    eps = _log_strain(sigma, min_singular)
    eps_e, dgamma = von_mises_project(eps, ep.shear_modulus, tau_y)
    F_E = np.where((dgamma > 0)[..., None, None], _compose(U, np.exp(eps_e), V), F_trial)
    return F_E, dgamma


def update_yield(yield_stress, dgamma, excess_norm, ep: ElasticParams, pp: PlasticParams):
    """Harden and/or soften the yield stress.

    Returns ``(new_yield, damaged)``; ``damaged`` is true where the yield
    stress has been driven to zero, after which the caller must zero the
    particle's Lame parameters.
    """
    tau = np.asarray(yield_stress, dtype=float)
    tau = tau + 2.0 * ep.shear_modulus * pp.hardening * np.asarray(dgamma, dtype=float)
    tau = tau - pp.softening * np.asarray(excess_norm, dtype=float)
    damaged = (tau <= 0.0) & (pp.softening > 0.0)
    tau = np.maximum(tau, 0.0)
    if tau.ndim == 0:
        return float(tau), bool(damaged)
    return tau, damaged


def return_map_herschel_bulkley(F_trial, ep: ElasticParams, pp: PlasticParams, dt: float):
    """Herschel-Bulkley (h = 1) viscoplastic return map; returns ``(F_E, tau)``."""
    if not dt > 0:
        raise ParameterDomainError("time step must be positive")
    F_trial = np.asarray(F_trial, dtype=float)
    _check_det(F_trial)
    U, sigma, V = svd3(F_trial)
    sigma_e, _ = herschel_bulkley_project(sigma, ep.shear_modulus, pp.yield_stress, pp.viscosity, dt)
    F_E = _compose(U, sigma_e, V)
    tau = herschel_bulkley_stress(U, sigma_e, ep.shear_modulus, ep.bulk_modulus)
    return F_E, tau


# ---------------------------------------------------------------------------
# per-particle material law used by the full-order solver


@dataclass(frozen=True)
class MaterialLaw:
    """Elastic law plus plastic flow rule applied to whole particle sets.

    ``elastic`` is one of ``fixed_corotated``, ``stvk`` or ``neo_hookean_bbar``
    (the Herschel-Bulkley stress). Per-particle moduli live on the particle
    system so weak elements and damage are just array edits.
    """

    elastic: str = "fixed_corotated"
    plastic: PlasticParams = PlasticParams()
    min_singular: float = 1e-4

    def __post_init__(self):
        if self.elastic not in ("fixed_corotated", "stvk", "neo_hookean_bbar"):
            raise ParameterDomainError(f"unknown elastic model {self.elastic!r}")

    def stress(self, F_E, mu, lam, kappa):
        if self.elastic == "fixed_corotated":
            return kirchhoff_fixed_corotated(F_E, (mu, lam), check=False)
        U, sigma, _ = svd3(F_E)
        if self.elastic == "stvk":
            eps = _log_strain(sigma, self.min_singular)
            return _sym(_compose(U, hencky_principal_stress(eps, mu, lam), U))
        return herschel_bulkley_stress(U, sigma, mu, kappa)

    def update(self, F_trial, mu, lam, kappa, yield_stress, dt):
        """Return map plus stress for a particle batch.

        Returns ``(F_E, tau, yield_stress, damaged)``.
        """
        pp = self.plastic
        n = F_trial.shape[0]
        damaged = np.zeros(n, dtype=bool)
        if pp.model == "none":
            return F_trial, self.stress(F_trial, mu, lam, kappa), yield_stress, damaged
        U, sigma, V = svd3(F_trial)
        if pp.model == "herschel_bulkley":
            sigma_e, _ = herschel_bulkley_project(sigma, mu, yield_stress, pp.viscosity, dt)
            F_E = _compose(U, sigma_e, V)
            return F_E, herschel_bulkley_stress(U, sigma_e, mu, kappa), yield_stress, damaged
        eps = _log_strain(sigma, self.min_singular)
        if pp.model == "drucker_prager":
            eps_e = drucker_prager_project(eps, mu, lam, pp.alpha)
        else:
            eps_e, dgamma = von_mises_project(eps, mu, yield_stress)
            new_yield = yield_stress + 2.0 * mu * pp.hardening * dgamma - pp.softening * dgamma
            damaged = (new_yield <= 0.0) & (pp.softening > 0)
            yield_stress = np.maximum(new_yield, 0.0)
        F_E = _compose(U, np.exp(eps_e), V)
        if self.elastic == "stvk":
            tau = _sym(_compose(U, hencky_principal_stress(eps_e, mu, lam), U))
        else:
            tau = self.stress(F_E, mu, lam, kappa)
        return F_E, tau, yield_stress, damaged
