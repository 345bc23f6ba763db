"""Desk-scale scene catalog and full-order trajectory generation.

A scene is described by a TOML file::

    [scene]
    name = "cube_drop"
    dt = 1e-3
    dx = 0.03125
    frames = 120

    [geometry]
    lo = [0.375, 0.2, 0.375]
    size = [0.25, 0.25, 0.25]
    velocity = [0.0, -1.0, 0.0]

    [material]
    youngs_modulus = 100.0
    poisson_ratio = 0.3

    [sweep]
    parameter = "youngs_modulus"
    train = [60.0, 100.0, 140.0, 180.0]
    test = [120.0]

The swept value ``mu`` overrides ``sweep.parameter`` in the material table.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .constitutive import MaterialLaw, PlasticParams, lame_from_E_nu
from .dataset import TrajectoryDataset, to_voigt
from .exceptions import ConfigError
from .mpm import BoxRegion, Grid, HalfSpace, ParticleSystem, SimConfig, default_mass_epsilon, step

SCENES = ("cube_drop", "cube_wall_collision", "sand_column", "bread_tear", "metal_squeeze", "toothpaste", "inclined_ball")

SWEEPABLE = ("youngs_modulus", "poisson_ratio", "friction_angle_deg", "yield_stress", "hardening", "softening", "viscosity", "density")

# per-scene defaults; config tables override them
_DEFAULTS = {
    "cube_drop": dict(
        geometry=dict(shape="box", lo=[0.375, 0.2, 0.375], size=[0.25, 0.25, 0.25], velocity=[0.0, -1.0, 0.0], floor=0.1, floor_kind="sticky"),
        material=dict(elastic="fixed_corotated", plastic="none"),
        sweep=dict(parameter="youngs_modulus"),
    ),
    "cube_wall_collision": dict(
        scene=dict(gravity=[0.0, 0.0, 0.0]),
        geometry=dict(shape="box", lo=[0.2, 0.375, 0.375], size=[0.25, 0.25, 0.25], velocity=[2.0, 0.0, 0.0], wall=0.8, wall_kind="slip"),
        material=dict(elastic="fixed_corotated", plastic="none"),
        sweep=dict(parameter="youngs_modulus"),
    ),
    "sand_column": dict(
        geometry=dict(shape="cylinder", center=[0.5, 0.5], base=0.1, radius=0.1, height=0.3, floor=0.1, floor_kind="sticky"),
        material=dict(elastic="stvk", plastic="drucker_prager", youngs_modulus=3.0e4, poisson_ratio=0.3, density=2.0, friction_angle_deg=30.0),
        sweep=dict(parameter="friction_angle_deg", range=[20.0, 40.0]),
    ),
    "bread_tear": dict(
        scene=dict(gravity=[0.0, 0.0, 0.0]),
        geometry=dict(shape="box", lo=[0.3, 0.4, 0.4], size=[0.4, 0.2, 0.2], grip=0.0625, pull_speed=0.5),
        material=dict(elastic="stvk", plastic="von_mises", youngs_modulus=200.0, poisson_ratio=0.3, yield_stress=2.0, softening=20.0),
        sweep=dict(parameter="yield_stress"),
        weak=dict(lo=[0.49, 0.0, 0.0], hi=[0.51, 1.0, 1.0], scale=0.5),
    ),
    "metal_squeeze": dict(
        scene=dict(gravity=[0.0, 0.0, 0.0]),
        geometry=dict(shape="box", lo=[0.375, 0.375, 0.375], size=[0.25, 0.25, 0.25], squeeze_speed=0.5, gap=0.0625),
        material=dict(elastic="stvk", plastic="von_mises", youngs_modulus=500.0, poisson_ratio=0.3, yield_stress=5.0, hardening=1.0),
        sweep=dict(parameter="hardening"),
    ),
    "toothpaste": dict(
        geometry=dict(shape="cylinder", center=[0.5, 0.5], base=0.35, radius=0.06, height=0.3, velocity=[0.0, -1.0, 0.0], floor=0.1, floor_kind="sticky"),
        material=dict(elastic="neo_hookean_bbar", plastic="herschel_bulkley", youngs_modulus=100.0, poisson_ratio=0.3, yield_stress=1.0, viscosity=0.5),
        sweep=dict(parameter="yield_stress"),
    ),
    "inclined_ball": dict(
        geometry=dict(shape="sphere", center=[0.35, 0.45, 0.5], radius=0.1, incline_deg=20.0, plane_point=[0.5, 0.3, 0.5], plane_kind="slip"),
        material=dict(elastic="fixed_corotated", plastic="none"),
        sweep=dict(parameter="youngs_modulus"),
    ),
}


@dataclass
class SceneConfig:
    name: str
    dt: float = 1e-3
    dx: float = 1.0 / 32.0
    frames: int = 100
    seed: int = 0
    transfer: str = "apic"
    gravity: tuple = (0.0, -9.8, 0.0)
    domain: tuple = (1.0, 1.0, 1.0)
    jitter: float = 0.0
    geometry: dict = field(default_factory=dict)
    material: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    weak: dict | None = None
    train: dict = field(default_factory=dict)
    deploy: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SCENES:
            raise ConfigError(f"unknown scene '{self.name}'; choose one of {', '.join(SCENES)}")
        if not (self.dt > 0 and self.dx > 0):
            raise ConfigError("dt and dx must be positive")
        if self.frames < 1:
            raise ConfigError("frames must be at least 1")
        param = self.sweep.get("parameter", "youngs_modulus")
        if param not in SWEEPABLE:
            raise ConfigError(f"cannot sweep '{param}'; choose one of {', '.join(SWEEPABLE)}")
        self.sweep.setdefault("parameter", param)
        train = [float(v) for v in self.sweep.get("train", [])]
        test = [float(v) for v in self.sweep.get("test", [])]
        if set(train) & set(test):
            raise ConfigError(f"train and test parameter values overlap: {sorted(set(train) & set(test))}")
        for v in train + test:
            self.check_mu(v)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        scene = dict(data.get("scene", {}))
        name = scene.get("name")
        if name is None:
            raise ConfigError("scene.name is required")
        defaults = _DEFAULTS.get(name, {})
        merged = {k: {**defaults.get(k, {}), **data.get(k, {})} for k in ("geometry", "material", "sweep", "train", "deploy")}
        weak = data.get("weak", defaults.get("weak"))
        scene = {**defaults.get("scene", {}), **scene}
        known = {"name", "dt", "dx", "frames", "seed", "transfer", "gravity", "domain", "jitter"}
        extra = set(scene) - known
        if extra:
            raise ConfigError(f"unknown [scene] keys: {sorted(extra)}")
        if "gravity" in scene:
            scene["gravity"] = tuple(float(g) for g in scene["gravity"])
        if "domain" in scene:
            scene["domain"] = tuple(float(g) for g in scene["domain"])
        return cls(**scene, weak=None if weak is None else dict(weak), **merged)

    @classmethod
    def from_toml(cls, text: str) -> "SceneConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid scene file: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        return cls.from_toml(Path(path).read_text())

    @property
    def parameter(self) -> str:
        return self.sweep["parameter"]

    def check_mu(self, mu):
        lo, hi = self.sweep.get("range", (-math.inf, math.inf))
        if not (np.isfinite(mu) and lo <= mu <= hi):
            raise ConfigError(f"{self.parameter} = {mu} is outside the scene range [{lo}, {hi}]")
        if self.parameter in ("youngs_modulus", "density", "viscosity") and mu <= 0:
            raise ConfigError(f"{self.parameter} must be positive, got {mu}")
        return float(mu)

    def split(self):
        """``(train, test)`` parameter lists.

        Explicit ``train``/``test`` lists win; otherwise ``values`` is split by
        a seeded random choice of ``n_test`` test values.
        """
        sw = self.sweep
        if "train" in sw or "test" in sw:
            return [float(v) for v in sw.get("train", [])], [float(v) for v in sw.get("test", [])]
        values = [float(v) for v in sw.get("values", [])]
        n_test = int(sw.get("n_test", 0))
        if n_test > len(values):
            raise ConfigError("n_test exceeds the number of sweep values")
        rng = np.random.default_rng(int(sw.get("split_seed", self.seed)))
        test_idx = set(rng.choice(len(values), size=n_test, replace=False).tolist())
        train = [v for i, v in enumerate(values) if i not in test_idx]
        test = [v for i, v in enumerate(values) if i in test_idx]
        return train, test

    def grid(self, boundaries=()):
        dims = tuple(int(math.ceil(d / self.dx)) + 1 for d in self.domain)
        return Grid(origin=np.zeros(3), dx=self.dx, dims=dims, boundaries=list(boundaries))


# --- seeding -----------------------------------------------------------------------


def lattice_points(lo, hi, dx, jitter=0.0, rng=None):
    """Eight points per cell: a lattice of spacing ``dx/2`` offset by ``dx/4``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    h = dx / 2.0
    counts = np.maximum(np.round((hi - lo) / h).astype(int), 0)
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * h for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    if jitter > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        pts = pts + rng.uniform(-jitter * h / 2, jitter * h / 2, size=pts.shape)
    return pts


def _shape_points(geo, dx, jitter, rng):
    shape = geo.get("shape", "box")
    if shape == "box":
        lo = np.asarray(geo["lo"], float)
        return lattice_points(lo, lo + np.asarray(geo["size"], float), dx, jitter, rng)
    if shape == "sphere":
        c, rad = np.asarray(geo["center"], float), float(geo["radius"])
        pts = lattice_points(c - rad, c + rad, dx, jitter, rng)
        return pts[np.sum((pts - c) ** 2, axis=1) <= rad * rad]
    if shape == "cylinder":
        cx, cz = geo["center"]
        rad, base, height = float(geo["radius"]), float(geo["base"]), float(geo["height"])
        pts = lattice_points([cx - rad, base, cz - rad], [cx + rad, base + height, cz + rad], dx, jitter, rng)
        return pts[(pts[:, 0] - cx) ** 2 + (pts[:, 2] - cz) ** 2 <= rad * rad]
    raise ConfigError(f"unknown shape '{shape}'")


def _material(cfg: SceneConfig, mu):
    mat = dict(cfg.material)
    if mu is not None:
        mat[cfg.parameter] = cfg.check_mu(mu)
    try:
        elastic = lame_from_E_nu(float(mat.get("youngs_modulus", 100.0)), float(mat.get("poisson_ratio", 0.3)))
        plastic = PlasticParams(
            model=mat.get("plastic", "none"),
            friction_angle=math.radians(float(mat.get("friction_angle_deg", 30.0))),
            yield_stress=float(mat.get("yield_stress", 0.0)),
            hardening=float(mat.get("hardening", 0.0)),
            softening=float(mat.get("softening", 0.0)),
            viscosity=float(mat.get("viscosity", 0.0)),
        )
        law = MaterialLaw(elastic=mat.get("elastic", "fixed_corotated"), plastic=plastic)
    except ValueError as exc:
        raise ConfigError(f"invalid material for {cfg.name}: {exc}") from None
    return elastic, plastic, law, float(mat.get("density", 1.0))


def _boundaries(cfg: SceneConfig):
    geo = cfg.geometry
    dx = cfg.dx
    out = []
    # keep particles away from the grid edge on every side
    for axis in range(3):
        lo = np.zeros(3)
        lo[axis] = 3 * dx
        n = np.zeros(3)
        n[axis] = 1.0
        out.append(HalfSpace(tuple(lo), tuple(n), "slip"))
        hi = np.zeros(3)
        hi[axis] = cfg.domain[axis] - 3 * dx
        out.append(HalfSpace(tuple(hi), tuple(-n), "slip"))
    if "floor" in geo:
        out.append(HalfSpace((0.0, float(geo["floor"]), 0.0), (0.0, 1.0, 0.0), geo.get("floor_kind", "sticky")))
    if "wall" in geo:
        out.append(HalfSpace((float(geo["wall"]), 0.0, 0.0), (-1.0, 0.0, 0.0), geo.get("wall_kind", "slip")))
    if cfg.name == "inclined_ball":
        a = math.radians(float(geo["incline_deg"]))
        out.append(HalfSpace(tuple(geo["plane_point"]), (math.sin(a), math.cos(a), 0.0), geo.get("plane_kind", "slip")))
    if cfg.name == "bread_tear":
        lo = np.asarray(geo["lo"], float)
        hi = lo + np.asarray(geo["size"], float)
        g, s = float(geo["grip"]), float(geo["pull_speed"])
        out.append(BoxRegion((lo[0] - dx, lo[1] - dx, lo[2] - dx), (lo[0] + g, hi[1] + dx, hi[2] + dx), (-s, 0.0, 0.0)))
        out.append(BoxRegion((hi[0] - g, lo[1] - dx, lo[2] - dx), (hi[0] + dx, hi[1] + dx, hi[2] + dx), (s, 0.0, 0.0)))
    if cfg.name == "metal_squeeze":
        lo = np.asarray(geo["lo"], float)
        hi = lo + np.asarray(geo["size"], float)
        s, gap = float(geo["squeeze_speed"]), float(geo["gap"])
        out.append(HalfSpace((0.0, lo[1] - gap, 0.0), (0.0, 1.0, 0.0), "sticky", (0.0, s, 0.0)))
        out.append(HalfSpace((0.0, hi[1] + gap, 0.0), (0.0, -1.0, 0.0), "sticky", (0.0, -s, 0.0)))
    return out


def weak_mask(cfg: SceneConfig, X):
    if not cfg.weak:
        return np.zeros(X.shape[0], dtype=bool)
    lo, hi = np.asarray(cfg.weak["lo"], float), np.asarray(cfg.weak["hi"], float)
    return np.all((X >= lo) & (X <= hi), axis=1)


def build_scene(cfg: SceneConfig, mu=None):
    """``(ParticleSystem, Grid, SimConfig)`` for one parameter value.

    Particle seeding depends only on the geometry and ``cfg.seed``, so every
    parameter value of a sweep shares the same reference particles.
    """
    rng = np.random.default_rng(cfg.seed)
    X = _shape_points(cfg.geometry, cfg.dx, cfg.jitter, rng)
    if X.shape[0] == 0:
        raise ConfigError("scene geometry contains no particles")
    elastic, plastic, law, density = _material(cfg, mu)
    V0 = cfg.dx**3 / 8.0
    ps = ParticleSystem.create(
        X,
        mass=density * V0,
        volume0=V0,
        mu=elastic.shear_modulus,
        lam=elastic.lame_modulus,
        kappa=elastic.bulk_modulus,
        yield_stress=plastic.yield_stress,
        v=cfg.geometry.get("velocity", (0.0, 0.0, 0.0)),
    )
    weak = weak_mask(cfg, X)
    if np.any(weak):
        scale = float(cfg.weak.get("scale", 1.0))
        for name in ("mu", "lam", "kappa", "yield_stress"):
            getattr(ps, name)[weak] *= scale
    grid = cfg.grid(_boundaries(cfg))
    sim = SimConfig(
        dt=cfg.dt,
        gravity=np.asarray(cfg.gravity, float),
        transfer=cfg.transfer,
        material=law,
        mass_epsilon=default_mass_epsilon(float(ps.mass.sum()), grid),
        mu=mu,
    )
    return ps, grid, sim


def simulate(cfg: SceneConfig, mu, frames=None, progress=None) -> TrajectoryDataset:
    """Run the full-order solver; frame 0 is the initial state."""
    ps, grid, sim = build_scene(cfg, mu)
    T = cfg.frames if frames is None else frames
    P = len(ps)
    pos = np.empty((T, P, 3))
    tau = np.empty((T, P, 6))
    aff = np.empty((T, P, 9))
    for n in range(T):
        if n > 0:
            ps = step(ps, grid, sim, (n - 1) * sim.dt)
        pos[n] = ps.x
        tau[n] = to_voigt(ps.tau)
        aff[n] = ps.C.reshape(P, 9)
        if progress is not None:
            progress(n)
    return TrajectoryDataset(ps.X, pos, tau, aff, mu=(float(mu),) if mu is not None else (), dt=sim.dt, dx=grid.dx)
