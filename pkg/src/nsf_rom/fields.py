"""Neural deformation, stress and affine fields as scikit-learn estimators.

All three decoders map ``(X, z)`` -- a reference position and a latent code --
to a physical quantity. The deformation field is trained jointly with a
point-cloud encoder that produces the codes; the stress and affine fields
regress onto the frozen codes afterwards::

    g = NeuralDeformationField(latent_dim=4).fit(train_sets)
    latents = g.latents_
    h = NeuralStressField(latent_dim=4).fit(train_sets, latents)
    l = NeuralAffineField(latent_dim=4).fit(train_sets, latents)
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import TrajectoryDataset, from_voigt
from .exceptions import ModelCorruptionError, ShapeError, TrainingDivergedError
from .nn import MLP, AdamState, Encoder, Standardizer, adam_step

log = logging.getLogger(__name__)

LEARNING_RATES = (1e-3, 5e-4, 2e-4, 1e-4, 5e-5)
MAX_BATCH_FRAMES = 32


@dataclass(frozen=True)
class TrainConfig:
    learning_rates: tuple = LEARNING_RATES
    epochs_per_rate: int = 300
    epoch_scale: float = 1.0
    batch_frames: int = MAX_BATCH_FRAMES
    seed: int = 0

    def __post_init__(self):
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if not 1 <= self.batch_frames <= MAX_BATCH_FRAMES:
            raise ValueError(f"batch_frames must lie in [1, {MAX_BATCH_FRAMES}]")

    @property
    def epochs(self) -> int:
        return max(1, int(round(self.epochs_per_rate * self.epoch_scale)))


def _as_list(datasets):
    if isinstance(datasets, TrajectoryDataset):
        return [datasets]
    datasets = list(datasets)
    if not datasets:
        raise ValueError("at least one dataset is required")
    return datasets


def _common_reference(datasets):
    ref = datasets[0].reference
    for ds in datasets[1:]:
        if ds.reference.shape != ref.shape or not np.array_equal(ds.reference, ref):
            raise ShapeError("all datasets must share the same reference particles")
    return ref


def _run_schedule(theta, loss_and_grad, n_items, cfg: TrainConfig, full_loss, verbose=False, label=""):
    """Adam over the staged learning-rate schedule with shuffled frame batches.

    Returns ``(theta, epoch_losses, stage_losses)``; the stage losses are the
    full-dataset losses measured at the end of each learning-rate stage.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros(theta.size)
    epoch_losses, stage_losses = [], []
    batch = min(cfg.batch_frames, n_items)
    t0 = time.perf_counter()
    for stage, lr in enumerate(cfg.learning_rates):
        for _ in range(cfg.epochs):
            order = rng.permutation(n_items)
            total = 0.0
            for start in range(0, n_items, batch):
                idx = np.sort(order[start : start + batch])
                loss, grad = loss_and_grad(theta, idx)
                if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                    raise TrainingDivergedError(
                        f"{label} training diverged at stage {stage} (lr={lr}) after "
                        f"{len(epoch_losses)} epochs; last finite loss "
                        f"{epoch_losses[-1] if epoch_losses else float('nan'):.3e}"
                    )
                theta, state = adam_step(theta, grad, state, lr)
                total += loss * idx.size
            epoch_losses.append(total / n_items)
        stage_losses.append(full_loss(theta))
        if verbose:
            log.info("%s stage %d lr=%.1e loss=%.3e (%.1fs)", label, stage, lr, stage_losses[-1], time.perf_counter() - t0)
    return theta, np.array(epoch_losses), np.array(stage_losses)


class _FieldBase(BaseEstimator):
    def _train_config(self):
        return TrainConfig(
            learning_rates=tuple(self.learning_rates),
            epochs_per_rate=self.epochs_per_rate,
            epoch_scale=self.epoch_scale,
            batch_frames=self.batch_frames,
            seed=self.seed,
        )

    def _normalized_points(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ShapeError(f"reference positions must be (n, 3), got {X.shape}")
        return self.input_scaler_.transform(X)


class NeuralDeformationField(_FieldBase):
    """Deformation decoder ``g(X, z) -> x`` plus encoder ``e(x^n) -> z``.

    Parameters
    ----------
    latent_dim : int
        Dimension ``r`` of the latent space.
    width : int
        Hidden width of the decoder (``beta * 3``).
    frame_stride : int
        Use every ``frame_stride``-th frame of each trajectory for training.
    """

    def __init__(
        self,
        latent_dim=4,
        width=24,
        hidden_layers=5,
        encoder_hidden=32,
        learning_rates=LEARNING_RATES,
        epochs_per_rate=300,
        epoch_scale=1.0,
        batch_frames=MAX_BATCH_FRAMES,
        frame_stride=1,
        seed=0,
        verbose=False,
    ):
        self.latent_dim = latent_dim
        self.width = width
        self.hidden_layers = hidden_layers
        self.encoder_hidden = encoder_hidden
        self.learning_rates = learning_rates
        self.epochs_per_rate = epochs_per_rate
        self.epoch_scale = epoch_scale
        self.batch_frames = batch_frames
        self.frame_stride = frame_stride
        self.seed = seed
        self.verbose = verbose

    def _build(self, n_points):
        self.decoder_ = MLP(3, self.latent_dim, 3, self.hidden_layers, self.width)
        self.encoder_ = Encoder(n_points, self.latent_dim, self.encoder_hidden)

    def fit(self, datasets, y=None):
        datasets = _as_list(datasets)
        ref = _common_reference(datasets)
        frames = np.concatenate([ds.positions[:: self.frame_stride] for ds in datasets])
        self.reference_ = ref.copy()
        self.input_scaler_ = Standardizer().fit(ref)
        self.output_scaler_ = Standardizer().fit(frames)
        self._build(ref.shape[0])
        Xn = self.input_scaler_.transform(ref)
        Yn = self.output_scaler_.transform(frames)
        enc_in = np.ascontiguousarray(Yn.transpose(0, 2, 1))
        n_dec = self.decoder_.layout.size
        theta = np.concatenate([self.decoder_.init(self.seed), self.encoder_.init(self.seed + 1)])
        dec, enc = self.decoder_, self.encoder_

        def loss_and_grad(theta, idx):
            tg, te = theta[:n_dec], theta[n_dec:]
            z, ec = enc.forward(te, enc_in[idx], cache=True)
            pred, dc = dec.forward(tg, Xn, z, cache=True)
            diff = pred - Yn[idx]
            loss = float(np.mean(diff * diff))
            gg, _, gz = dec.backward(tg, dc, diff * (2.0 / diff.size))
            ge, _ = enc.backward(te, ec, gz)
            return loss, np.concatenate([gg, ge])

        def full_loss(theta):
            return self._mse(theta, Xn, enc_in, Yn)

        cfg = self._train_config()
        theta, self.loss_history_, self.stage_losses_ = _run_schedule(
            theta, loss_and_grad, frames.shape[0], cfg, full_loss, self.verbose, "deformation"
        )
        self.theta_ = theta[:n_dec].copy()
        self.encoder_theta_ = theta[n_dec:].copy()
        self.train_mse_ = float(self.stage_losses_[-1])
        self.latents_ = [self.encode(ds.positions) for ds in datasets]
        return self

    def _mse(self, theta, Xn, enc_in, Yn, chunk=32):
        n_dec = self.decoder_.layout.size
        total = 0.0
        for s in range(0, enc_in.shape[0], chunk):
            z = self.encoder_.forward(theta[n_dec:], enc_in[s : s + chunk])
            d = self.decoder_.forward(theta[:n_dec], Xn, z) - Yn[s : s + chunk]
            total += float(np.sum(d * d))
        return total / Yn.size

    def encode(self, frames, chunk=64):
        """Latent codes for position frames of shape ``(k, P, 3)``."""
        check_is_fitted(self, "encoder_theta_")
        frames = np.asarray(frames, dtype=float)
        if frames.ndim == 2:
            frames = frames[None]
        out = []
        for s in range(0, frames.shape[0], chunk):
            fn = self.output_scaler_.transform(frames[s : s + chunk]).transpose(0, 2, 1)
            out.append(self.encoder_.forward(self.encoder_theta_, fn))
        return np.concatenate(out)

    transform = encode

    def predict(self, X, latents):
        """Deformed positions ``(k, n, 3)`` for codes ``(k, r)`` (or ``(n, 3)`` for one code)."""
        check_is_fitted(self, "theta_")
        latents = np.asarray(latents, dtype=float)
        out = self.decoder_.forward(self.theta_, self._normalized_points(X), np.atleast_2d(latents))
        out = self.output_scaler_.inverse_transform(out)
        return out[0] if latents.ndim == 1 else out

    def latent_jacobian(self, X, z):
        """``d g / d z`` at one code, shape ``(n, 3, r)``."""
        check_is_fitted(self, "theta_")
        J = self.decoder_.code_jacobian(self.theta_, self._normalized_points(X), np.atleast_2d(z))
        return J * self.output_scaler_.std[None, :, None]

    @property
    def n_parameters_(self):
        return self.theta_.size + self.encoder_theta_.size


class _LatentRegressor(_FieldBase):
    """Shared trainer for decoders regressed on frozen latent codes."""

    _out_dim = None
    _label = ""

    def __init__(
        self,
        latent_dim=4,
        width=36,
        hidden_layers=5,
        learning_rates=LEARNING_RATES,
        epochs_per_rate=600,
        epoch_scale=1.0,
        batch_frames=MAX_BATCH_FRAMES,
        frame_stride=1,
        mu_conditioning=False,
        seed=0,
        verbose=False,
    ):
        self.latent_dim = latent_dim
        self.width = width
        self.hidden_layers = hidden_layers
        self.learning_rates = learning_rates
        self.epochs_per_rate = epochs_per_rate
        self.epoch_scale = epoch_scale
        self.batch_frames = batch_frames
        self.frame_stride = frame_stride
        self.mu_conditioning = mu_conditioning
        self.seed = seed
        self.verbose = verbose

    def _targets(self, ds):
        raise NotImplementedError

    def _codes(self, latents, mu):
        latents = np.atleast_2d(np.asarray(latents, dtype=float))
        if latents.shape[1] != self.latent_dim:
            raise ShapeError(f"latent codes must have {self.latent_dim} components, got {latents.shape[1]}")
        if not self.mu_conditioning:
            return latents
        mu = np.broadcast_to(np.atleast_1d(np.asarray(mu, dtype=float)), (latents.shape[0], self.n_mu_))
        return np.concatenate([latents, mu], axis=1)

    def fit(self, datasets, latents):
        datasets = _as_list(datasets)
        if isinstance(latents, np.ndarray) and latents.ndim == 2:
            latents = [latents]
        if len(latents) != len(datasets):
            raise ShapeError("need one latent trajectory per dataset")
        ref = _common_reference(datasets)
        s = self.frame_stride
        self.n_mu_ = len(datasets[0].mu) if self.mu_conditioning else 0
        codes = np.concatenate(
            [self._codes(np.asarray(z)[::s], ds.mu if self.mu_conditioning else None) for ds, z in zip(datasets, latents)]
        )
        targets = np.concatenate([self._targets(ds)[::s] for ds in datasets])
        if codes.shape[0] != targets.shape[0]:
            raise ShapeError("latent trajectories and datasets disagree on frame counts")
        self.reference_ = ref.copy()
        self.input_scaler_ = Standardizer().fit(ref)
        self.code_scaler_ = Standardizer().fit(codes)
        self.output_scaler_ = Standardizer().fit(targets)
        self.decoder_ = MLP(3, codes.shape[1], self._out_dim, self.hidden_layers, self.width)
        Xn = self.input_scaler_.transform(ref)
        Zn = self.code_scaler_.transform(codes)
        Yn = self.output_scaler_.transform(targets)
        # constant components are reproduced exactly by the scaler; do not fit them
        live = (~self.output_scaler_.degenerate).astype(float)
        n_live = max(int(live.sum()), 1)
        dec = self.decoder_
        per_frame = Xn.shape[0] * n_live

        def loss_and_grad(theta, idx):
            pred, cache = dec.forward(theta, Xn, Zn[idx], cache=True)
            diff = (pred - Yn[idx]) * live
            loss = float(np.sum(diff * diff)) / (idx.size * per_frame)
            g, _, _ = dec.backward(theta, cache, diff * (2.0 / (idx.size * per_frame)))
            return loss, g

        def full_loss(theta, chunk=32):
            total = 0.0
            for s0 in range(0, Zn.shape[0], chunk):
                d = (dec.forward(theta, Xn, Zn[s0 : s0 + chunk]) - Yn[s0 : s0 + chunk]) * live
                total += float(np.sum(d * d))
            return total / (Zn.shape[0] * per_frame)

        cfg = self._train_config()
        theta = dec.init(self.seed)
        self.theta_, self.loss_history_, self.stage_losses_ = _run_schedule(
            theta, loss_and_grad, codes.shape[0], cfg, full_loss, self.verbose, self._label
        )
        self.train_mse_ = float(self.stage_losses_[-1])
        return self

    def predict_raw(self, X, latents, mu=None):
        """Flat outputs ``(k, n, out_dim)`` in physical units."""
        check_is_fitted(self, "theta_")
        latents = np.asarray(latents, dtype=float)
        Zn = self.code_scaler_.transform(self._codes(latents, mu))
        out = self.decoder_.forward(self.theta_, self._normalized_points(X), Zn)
        out = self.output_scaler_.inverse_transform(out)
        deg = self.output_scaler_.degenerate
        if np.any(deg):
            out[..., deg] = self.output_scaler_.mean[deg]
        if not np.all(np.isfinite(out)):
            raise ModelCorruptionError(f"{self._label} decoder produced non-finite values")
        return out[0] if latents.ndim == 1 else out


class NeuralStressField(_LatentRegressor):
    """Kirchhoff stress decoder ``h(X, z) -> tau`` (6 independent components)."""

    _out_dim = 6
    _label = "stress"

    def _targets(self, ds):
        return ds.stress

    def predict(self, X, latents, mu=None):
        """Symmetric stress tensors ``(k, n, 3, 3)`` (``(n, 3, 3)`` for one code)."""
        return from_voigt(self.predict_raw(X, latents, mu))


class NeuralAffineField(_LatentRegressor):
    """Affine momentum decoder ``l(X, z) -> C`` (9 components)."""

    _out_dim = 9
    _label = "affine"

    def __init__(
        self,
        latent_dim=4,
        width=36,
        hidden_layers=5,
        learning_rates=LEARNING_RATES,
        epochs_per_rate=600,
        epoch_scale=1.0,
        batch_frames=MAX_BATCH_FRAMES,
        frame_stride=1,
        mu_conditioning=False,
        seed=0,
        verbose=False,
    ):
        super().__init__(
            latent_dim=latent_dim,
            width=width,
            hidden_layers=hidden_layers,
            learning_rates=learning_rates,
            epochs_per_rate=epochs_per_rate,
            epoch_scale=epoch_scale,
            batch_frames=batch_frames,
            frame_stride=frame_stride,
            mu_conditioning=mu_conditioning,
            seed=seed,
            verbose=verbose,
        )

    def _targets(self, ds):
        return ds.affine

    def predict(self, X, latents, mu=None):
        out = self.predict_raw(X, latents, mu)
        return out.reshape(out.shape[:-1] + (3, 3))
