"""Error metrics, resolution upsampling and runtime accounting."""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import ShapeError, UndefinedMetricError
from .mpm import step as mpm_step
from .rom import InversionConfig, rollout


class ExtrapolationWarning(UserWarning):
    pass


def _sq_ratio(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    diff = pred - truth
    num = float(np.sum(diff * diff))
    den = float(np.sum(truth * truth))
    return num, den


def relative_error(pred, truth):
    """Total relative deformation error
    ``sqrt(sum |pred - truth|^2 / sum |truth|^2)`` over all frames and particles."""
    num, den = _sq_ratio(pred, truth)
    if den == 0.0:
        raise UndefinedMetricError("ground truth has zero norm; relative error is undefined")
    return float(np.sqrt(num / den))


def stress_error(pred, truth):
    """Relative error of stress frames (Voigt or full tensors); zero on two zero fields."""
    num, den = _sq_ratio(pred, truth)
    if den == 0.0:
        if num == 0.0:
            return 0.0
        raise UndefinedMetricError("ground-truth stress is identically zero; relative error is undefined")
    return float(np.sqrt(num / den))


def per_frame_error(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    axes = tuple(range(1, pred.ndim))
    num = np.sum((pred - truth) ** 2, axis=axes)
    den = np.sum(truth**2, axis=axes)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(num / den)


def reduction_ratio(n_particles: int, latent_dim: int):
    """``3|P| / r``; an int when it divides evenly, a float otherwise."""
    if latent_dim <= 0 or n_particles <= 0:
        raise ValueError("particle count and latent dimension must be positive")
    g = Fraction(3 * int(n_particles), int(latent_dim))
    return g.numerator if g.denominator == 1 else float(g)


def upsample(deformation, latents, Xq, chunk=65536):
    """Decode positions of arbitrary reference points for every latent.

    Pure decoder queries; nothing is simulated. Points outside the bounding
    box of the training particles trigger an :class:`ExtrapolationWarning`.
    """
    Xq = np.asarray(Xq, dtype=float)
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    ref = getattr(deformation, "reference_", None)
    if ref is not None:
        lo, hi = ref.min(axis=0), ref.max(axis=0)
        outside = np.any((Xq < lo) | (Xq > hi), axis=1)
        if np.any(outside):
            warnings.warn(f"{int(outside.sum())} query point(s) lie outside the training reference box", ExtrapolationWarning, stacklevel=2)
    out = np.empty((latents.shape[0], Xq.shape[0], 3))
    for s in range(0, Xq.shape[0], chunk):
        out[:, s : s + chunk] = deformation.predict(Xq[s : s + chunk], latents)
    return out


def densify(X, factor, spacing, seed=0):
    """``factor`` jittered copies of each reference point, kept inside the
    bounding box of ``X``."""
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=float)
    reps = np.repeat(X, factor, axis=0)
    reps += rng.uniform(-0.5 * spacing, 0.5 * spacing, size=reps.shape)
    return np.clip(reps, X.min(axis=0), X.max(axis=0))


# --- runtime report -------------------------------------------------------------------


CATEGORIES = ("mpm", "inference", "integration_set", "inversion")


@dataclass
class EvalReport:
    n_particles: int
    latent_dim: int
    n_samples: int
    steps: int
    trials: int
    gamma: float
    delta: float | None = None
    frame_errors: list = field(default_factory=list)
    n_integration_mean: float = 0.0
    full_seconds_per_100: float = 0.0
    reduced_seconds_per_100: float = 0.0
    breakdown_per_100: dict = field(default_factory=dict)
    memory_full_bytes: int = 0
    memory_reduced_bytes: int = 0

    @property
    def integration_ratio(self) -> float:
        return self.n_integration_mean / self.n_particles

    @property
    def mpm_ratio(self) -> float:
        """Reduced MPM stepping time over full-order stepping time."""
        if self.full_seconds_per_100 == 0:
            return float("nan")
        return self.breakdown_per_100.get("mpm", 0.0) / self.full_seconds_per_100

    def as_dict(self):
        d = asdict(self)
        d.pop("frame_errors")
        d.pop("breakdown_per_100")
        for k, v in self.breakdown_per_100.items():
            d[f"{k}_seconds_per_100"] = v
        d["integration_ratio"] = self.integration_ratio
        d["mpm_ratio"] = self.mpm_ratio
        return d

    def to_keyvalue(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def to_text(self) -> str:
        lines = [
            "evaluation report",
            f"  particles            {self.n_particles}",
            f"  latent dimension     {self.latent_dim}",
            f"  reduction ratio      {self.gamma}",
            f"  sample particles     {self.n_samples}",
            f"  integration (mean)   {self.n_integration_mean:.1f} ({100 * self.integration_ratio:.2f}% of particles)",
        ]
        if self.delta is not None:
            lines.append(f"  deformation error    {100 * self.delta:.3f}%")
        lines += [
            f"  timing over {self.trials} trials of {self.steps} steps (seconds per 100 steps)",
            f"    full order         {self.full_seconds_per_100:.4f}",
            f"    reduced total      {self.reduced_seconds_per_100:.4f}",
        ]
        for k, v in self.breakdown_per_100.items():
            lines.append(f"      {k:<18} {v:.4f}")
        lines += [
            f"  reduced/full MPM     {self.mpm_ratio:.3f}",
            f"  memory full          {self.memory_full_bytes / 2**20:.2f} MiB",
            f"  memory reduced       {self.memory_reduced_bytes / 2**20:.2f} MiB",
        ]
        return "\n".join(lines) + "\n"


def memory_estimate(n_particles, n_nodes, n_parameters=0):
    """Bytes of live state: per-particle arrays, per-node grid arrays and weights."""
    per_particle = 8 * (3 + 3 + 3 + 1 + 1 + 9 + 9 + 9 + 5) + 1
    per_node = 8 * (1 + 3 + 3 + 3)
    return int(n_particles * per_particle + n_nodes * per_node + 8 * n_parameters)


def time_full_order(particles, grid, cfg, steps, trials=10):
    """Mean seconds for ``steps`` full-order steps from ``particles``."""
    times = []
    for _ in range(trials):
        ps = particles.copy()
        tic = time.perf_counter()
        for n in range(steps):
            ps = mpm_step(ps, grid, cfg, n * cfg.dt)
        times.append(time.perf_counter() - tic)
    return float(np.mean(times))


def benchmark(fields, particles, grid, cfg, samples, z0, z_prev, steps, trials=10, truth=None,
              inversion: InversionConfig = InversionConfig(), n_parameters=0):
    """Time the full-order solver against the reduced rollout.

    Both pipelines start from the same state and run ``steps`` steps; each is
    averaged over ``trials`` runs. ``truth`` (position frames, first frame
    included) adds the deformation error of the last rollout.
    """
    full = time_full_order(particles, grid, cfg, steps, trials)
    totals, parts, n_int = [], {k: [] for k in CATEGORIES}, []
    result = None
    for _ in range(trials):
        result = rollout(fields, particles, grid, cfg, steps, samples, z0, z_prev, inversion, decode=truth is not None)
        totals.append(result.timings["total"])
        for k in CATEGORIES:
            parts[k].append(result.timings.get(k, 0.0))
        n_int.append(result.n_integration.mean())
    scale = 100.0 / steps
    report = EvalReport(
        n_particles=len(particles),
        latent_dim=fields.latent_dim,
        n_samples=int(result.n_samples.max()),
        steps=steps,
        trials=trials,
        gamma=reduction_ratio(len(particles), fields.latent_dim),
        n_integration_mean=float(np.mean(n_int)),
        full_seconds_per_100=full * scale,
        reduced_seconds_per_100=float(np.mean(totals)) * scale,
        breakdown_per_100={k: float(np.mean(v)) * scale for k, v in parts.items()},
        memory_full_bytes=memory_estimate(len(particles), grid.n_nodes),
        memory_reduced_bytes=memory_estimate(int(np.ceil(np.mean(n_int))), 27 * int(np.ceil(np.mean(n_int))), n_parameters),
    )
    if truth is not None:
        truth = np.asarray(truth)[: steps + 1]
        report.delta = relative_error(result.frames[1:], truth[1:])
        report.frame_errors = per_frame_error(result.frames, truth).tolist()
    return report
