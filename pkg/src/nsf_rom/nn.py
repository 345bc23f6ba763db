"""Minimal numpy neural-network kit: ELU MLP decoders, strided 1-D conv
encoder, Xavier init, reverse-mode gradients and Adam.

Parameters of a network are one flat float64 vector; :class:`ParamLayout`
maps names to views into it, which keeps Adam and checkpointing trivial.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ArchitectureError, ShapeError


def _elu_parts(x):
    """``(elu(x), elu'(x))`` sharing one exponential."""
    e = np.minimum(x, 0.0, out=np.empty_like(x))
    np.expm1(e, out=e)
    act = np.maximum(x, 0.0)
    act += e
    e += 1.0
    return act, e


def elu(x):
    x = np.asarray(x, dtype=float)
    e = np.minimum(x, 0.0, out=np.empty_like(x))
    np.expm1(e, out=e)
    e += np.maximum(x, 0.0)
    return e[()]


def elu_grad(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamLayout:
    """Ordered ``name -> shape`` manifest for a flat parameter vector."""

    def __init__(self, entries):
        self.entries = [(name, tuple(shape)) for name, shape in entries]
        self.offsets = {}
        pos = 0
        for name, shape in self.entries:
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size, shape)
            pos += size
        self.size = pos

    def views(self, theta):
        theta = np.asarray(theta)
        if theta.shape != (self.size,):
            raise ShapeError(f"parameter vector has shape {theta.shape}, layout expects ({self.size},)")
        return {name: theta[a:b].reshape(shape) for name, (a, b, shape) in self.offsets.items()}

    def zeros(self):
        return np.zeros(self.size)

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.entries == other.entries


def xavier_init(layout: ParamLayout, fans: dict, seed) -> np.ndarray:
    """Uniform Xavier weights, zero biases. ``fans`` maps weight names to (fan_in, fan_out)."""
    rng = np.random.default_rng(seed)
    theta = layout.zeros()
    views = layout.views(theta)
    for name, _ in layout.entries:
        if name in fans:
            bound = xavier_bound(*fans[name])
            views[name][...] = rng.uniform(-bound, bound, size=views[name].shape)
    return theta


class MLP:
    """Decoder ``f(X, z)`` with ELU hidden layers and a linear output.

    ``X`` holds per-point inputs of shape ``(P, point_dim)`` and ``z`` per-frame
    codes of shape ``(k, code_dim)``; the output has shape ``(k, P, out_dim)``.
    The first layer is split so ``X W_x`` is computed once per batch.
    """

    def __init__(self, point_dim: int, code_dim: int, out_dim: int, hidden_layers: int = 5, width: int = 32):
        if width <= 0 or out_dim <= 0:
            raise ArchitectureError("layer widths must be positive")
        self.point_dim, self.code_dim, self.out_dim = point_dim, code_dim, out_dim
        self.hidden_layers, self.width = hidden_layers, width
        entries = []
        if hidden_layers == 0:
            first_out = out_dim
        else:
            first_out = width
        entries += [("W0x", (point_dim, first_out)), ("W0z", (code_dim, first_out)), ("b0", (first_out,))]
        self.fans = {"W0x": (point_dim + code_dim, first_out), "W0z": (point_dim + code_dim, first_out)}
        for i in range(1, hidden_layers + 1):
            n_out = out_dim if i == hidden_layers else width
            entries += [(f"W{i}", (width, n_out)), (f"b{i}", (n_out,))]
            self.fans[f"W{i}"] = (width, n_out)
        self.layout = ParamLayout(entries)

    @property
    def n_layers(self) -> int:
        return self.hidden_layers + 1

    def init(self, seed) -> np.ndarray:
        return xavier_init(self.layout, self.fans, seed)

    def _check(self, X, z):
        X = np.asarray(X, dtype=float)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if X.ndim != 2 or X.shape[1] != self.point_dim:
            raise ShapeError(f"point input must be (P, {self.point_dim}), got {X.shape}")
        if z.shape[1] != self.code_dim:
            raise ShapeError(f"code input must be (k, {self.code_dim}), got {z.shape}")
        return X, z

    def forward(self, theta, X, z, cache=False):
        X, z = self._check(X, z)
        p = self.layout.views(theta)
        a = (X @ p["W0x"])[None, :, :] + (z @ p["W0z"] + p["b0"])[:, None, :]
        k, n = a.shape[:2]
        h = a.reshape(k * n, -1)
        acts, slopes = [], []
        for i in range(1, self.n_layers):
            if cache:
                act, slope = _elu_parts(h)
                acts.append(act)
                slopes.append(slope)
            else:
                act = elu(h)
            h = act @ p[f"W{i}"]
            h += p[f"b{i}"]
        h = h.reshape(k, n, -1)
        if cache:
            return h, (X, z, acts, slopes)
        return h

    def backward(self, theta, cache, grad_out):
        """Reverse-mode pass. Returns ``(grad_theta, grad_X, grad_z)``."""
        X, z, acts, slopes = cache
        p = self.layout.views(theta)
        grad = self.layout.zeros()
        g = self.layout.views(grad)
        grad_out = np.asarray(grad_out, dtype=float)
        k, n = grad_out.shape[:2]
        delta = grad_out.reshape(k * n, -1)
        for i in range(self.n_layers - 1, 0, -1):
            g[f"W{i}"][...] = acts[i - 1].T @ delta
            g[f"b{i}"][...] = delta.sum(axis=0)
            delta = delta @ p[f"W{i}"].T
            delta *= slopes[i - 1]
        delta = delta.reshape(k, n, -1)
        sum_k = delta.sum(axis=0)
        sum_p = delta.sum(axis=1)
        g["W0x"][...] = X.T @ sum_k
        g["W0z"][...] = z.T @ sum_p
        g["b0"][...] = sum_p.sum(axis=0)
        grad_X = sum_k @ p["W0x"].T
        grad_z = sum_p @ p["W0z"].T
        return grad, grad_X, grad_z

    def code_jacobian(self, theta, X, z):
        """Forward-mode Jacobian ``d out / d z`` for a single code; shape ``(P, out_dim, code_dim)``."""
        X, z = self._check(X, z)
        if z.shape[0] != 1:
            raise ShapeError("code_jacobian takes a single code vector")
        p = self.layout.views(theta)
        a = X @ p["W0x"] + z[0] @ p["W0z"] + p["b0"]
        tangent = np.broadcast_to(p["W0z"], (X.shape[0],) + p["W0z"].shape)  # (P, r, h)
        for i in range(1, self.n_layers):
            d = elu_grad(a)
            tangent = (tangent * d[:, None, :]) @ p[f"W{i}"]
            a = elu(a) @ p[f"W{i}"] + p[f"b{i}"]
        return np.swapaxes(tangent, 1, 2)


def conv_output_length(length: int, kernel: int = 6, stride: int = 4) -> int:
    return (length - kernel) // stride + 1


def encoder_lengths(n_points: int, kernel: int = 6, stride: int = 4, stop: int = 12):
    """Sequence lengths produced by the conv stack, starting with ``n_points``."""
    if n_points < kernel:
        raise ArchitectureError(f"encoder needs at least {kernel} points, got {n_points}")
    lengths = [n_points]
    while lengths[-1] > stop:
        lengths.append(conv_output_length(lengths[-1], kernel, stride))
    return lengths


def _windows(x, kernel, stride):
    # (k, C, L) -> (k, C, L_out, kernel)
    return np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


class Conv1d:
    """Valid strided 1-D convolution over channels-first sequences."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 6, stride: int = 4):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride

    def forward(self, W, b, x):
        win = _windows(x, self.kernel, self.stride)
        return np.einsum("kcls,ocs->kol", win, W) + b[None, :, None], win

    def backward(self, W, win, length, grad_out):
        gW = np.einsum("kol,kcls->ocs", grad_out, win)
        gb = grad_out.sum(axis=(0, 2))
        gwin = np.einsum("kol,ocs->kcls", grad_out, W)
        gx = np.zeros(grad_out.shape[:1] + (self.c_in, length))
        n_out = grad_out.shape[2]
        span = self.stride * (n_out - 1) + 1
        for s in range(self.kernel):
            gx[:, :, s : s + span : self.stride] += gwin[..., s]
        return gW, gb, gx


class Encoder:
    """Point-cloud encoder: conv stack (kernel 6, stride 4, 3 channels) until the
    sequence is at most 12 long, flatten, dense to ``hidden``, dense to ``r``.

    Input frames have shape ``(k, 3, P)`` (coordinates as channels, particles in
    index order). ELU follows every conv layer and the hidden dense layer.
    """

    def __init__(self, n_points: int, latent_dim: int, hidden: int = 32, channels: int = 3, kernel: int = 6, stride: int = 4, stop: int = 12):
        self.n_points, self.latent_dim, self.hidden = n_points, latent_dim, hidden
        self.channels, self.kernel, self.stride, self.stop = channels, kernel, stride, stop
        self.lengths = encoder_lengths(n_points, kernel, stride, stop)
        self.convs = []
        entries = []
        self.fans = {}
        c_in = 3
        for i in range(len(self.lengths) - 1):
            self.convs.append(Conv1d(c_in, channels, kernel, stride))
            entries += [(f"K{i}", (channels, c_in, kernel)), (f"c{i}", (channels,))]
            self.fans[f"K{i}"] = (c_in * kernel, channels * kernel)
            c_in = channels
        self.flat_dim = c_in * self.lengths[-1]
        entries += [("D0", (self.flat_dim, hidden)), ("d0", (hidden,)), ("D1", (hidden, latent_dim)), ("d1", (latent_dim,))]
        self.fans["D0"] = (self.flat_dim, hidden)
        self.fans["D1"] = (hidden, latent_dim)
        self.layout = ParamLayout(entries)

    def init(self, seed) -> np.ndarray:
        return xavier_init(self.layout, self.fans, seed)

    def forward(self, theta, frames, cache=False):
        frames = np.asarray(frames, dtype=float)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[1:] != (3, self.n_points):
            raise ShapeError(f"encoder expects frames of shape (k, 3, {self.n_points}), got {frames.shape}")
        p = self.layout.views(theta)
        h = frames
        saved = []
        for i, conv in enumerate(self.convs):
            a, win = conv.forward(p[f"K{i}"], p[f"c{i}"], h)
            saved.append((win, h.shape[2], a))
            h = elu(a)
        flat = h.reshape(h.shape[0], -1)
        a0 = flat @ p["D0"] + p["d0"]
        z = elu(a0) @ p["D1"] + p["d1"]
        if cache:
            return z, (saved, flat, a0)
        return z

    def backward(self, theta, cache, grad_z):
        """Returns ``(grad_theta, grad_frames)``."""
        saved, flat, a0 = cache
        p = self.layout.views(theta)
        grad = self.layout.zeros()
        g = self.layout.views(grad)
        grad_z = np.atleast_2d(grad_z)
        g["D1"][...] = elu(a0).T @ grad_z
        g["d1"][...] = grad_z.sum(axis=0)
        da0 = (grad_z @ p["D1"].T) * elu_grad(a0)
        g["D0"][...] = flat.T @ da0
        g["d0"][...] = da0.sum(axis=0)
        dh = (da0 @ p["D0"].T).reshape(flat.shape[0], self.channels if self.convs else 3, -1)
        for i in range(len(self.convs) - 1, -1, -1):
            win, length, a = saved[i]
            da = dh * elu_grad(a)
            gW, gb, dh = self.convs[i].backward(p[f"K{i}"], win, length, da)
            g[f"K{i}"][...] = gW
            g[f"c{i}"][...] = gb
        return grad, dh


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(theta, grad, state: AdamState, lr: float, cfg: AdamConfig = AdamConfig()):
    """Bias-corrected Adam update; returns ``(theta, state)`` as new objects."""
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return theta, AdamState(m, v, t)


@dataclass
class Standardizer:
    """Per-component affine normalisation to zero mean and unit variance.

    Components with zero variance keep ``std = 1`` and are listed in
    ``degenerate``.
    """

    mean: np.ndarray = None
    std: np.ndarray = None
    degenerate: np.ndarray = field(default=None)

    def fit(self, data):
        data = np.asarray(data, dtype=float)
        if data.size == 0:
            raise ValueError("cannot fit normalisation on an empty dataset")
        flat = data.reshape(-1, data.shape[-1])
        self.mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.degenerate = ~(std > 0)
        self.std = np.where(self.degenerate, 1.0, std)
        return self

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim), np.zeros(dim, dtype=bool))

    def transform(self, data):
        return (np.asarray(data, dtype=float) - self.mean) / self.std

    def inverse_transform(self, data):
        return np.asarray(data, dtype=float) * self.std + self.mean

    @property
    def dim(self):
        return self.mean.shape[0]


def normalize_dataset(data):
    """Fit a :class:`Standardizer` on ``data`` and return ``(normalised, stats)``."""
    stats = Standardizer().fit(data)
    return stats.transform(data), stats
