"""Trajectory datasets and their ``.nsfd`` binary format.

Layout (all little-endian)::

    magic    4s   b"NSFD"
    version  u32
    n_points u64
    n_frames u64
    n_mu     u32
    mu       f64 * n_mu
    dt       f64
    dx       f64
    X        f64 * 3P                 reference positions
    frames   n_frames * (3P + 6P + 9P) f64   positions, stress (Voigt), affine

Stress is stored in Voigt order ``xx, yy, zz, yz, xz, xy``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ShapeError

MAGIC = b"NSFD"
VERSION = 1
_VOIGT = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_F64 = np.dtype("<f8")


def to_voigt(tau):
    tau = np.asarray(tau, dtype=float)
    return np.stack([tau[..., i, j] for i, j in _VOIGT], axis=-1)


def from_voigt(s):
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape[:-1] + (3, 3))
    for c, (i, j) in enumerate(_VOIGT):
        out[..., i, j] = s[..., c]
        out[..., j, i] = s[..., c]
    return out


@dataclass
class TrajectoryDataset:
    """Frames ``{(x_p^n, tau_p^n, C_p^n)}`` of one simulation.

    ``positions`` is ``(T, P, 3)``, ``stress`` ``(T, P, 6)`` in Voigt order and
    ``affine`` ``(T, P, 9)`` row-major.
    """

    reference: np.ndarray
    positions: np.ndarray
    stress: np.ndarray
    affine: np.ndarray
    mu: tuple = ()
    dt: float = 0.0
    dx: float = 0.0

    def __post_init__(self):
        self.reference = np.ascontiguousarray(self.reference, dtype=float)
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        self.stress = np.ascontiguousarray(self.stress, dtype=float)
        self.affine = np.ascontiguousarray(self.affine, dtype=float).reshape(self.positions.shape[:2] + (9,))
        self.mu = tuple(float(m) for m in np.atleast_1d(self.mu)) if self.mu is not None else ()
        P = self.reference.shape[0]
        T = self.positions.shape[0]
        if self.reference.shape != (P, 3):
            raise ShapeError("reference positions must be (P, 3)")
        for name, arr, width in (("positions", self.positions, 3), ("stress", self.stress, 6), ("affine", self.affine, 9)):
            if arr.shape != (T, P, width):
                raise ShapeError(f"{name} must be ({T}, {P}, {width}), got {arr.shape}")

    @property
    def n_points(self) -> int:
        return self.reference.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def stress_tensors(self):
        return from_voigt(self.stress)

    def affine_tensors(self):
        return self.affine.reshape(self.affine.shape[:2] + (3, 3))

    def frames(self, stride=1):
        return self.positions[::stride]


def _header(ds: TrajectoryDataset) -> bytes:
    mu = ds.mu
    return (
        MAGIC
        + struct.pack("<IQQI", VERSION, ds.n_points, ds.n_frames, len(mu))
        + struct.pack(f"<{len(mu)}d", *mu)
        + struct.pack("<dd", float(ds.dt), float(ds.dx))
    )


def expected_size(n_points, n_frames, n_mu) -> int:
    header = 4 + 4 + 8 + 8 + 4 + 8 * n_mu + 16
    return header + n_frames * 18 * n_points * 8 + 3 * n_points * 8


def dataset_bytes(ds: TrajectoryDataset) -> bytes:
    body = np.concatenate([ds.positions, ds.stress, ds.affine], axis=2).astype(_F64, copy=False)
    return _header(ds) + ds.reference.astype(_F64).tobytes() + body.tobytes()


def write_dataset(path, ds: TrajectoryDataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(raw: bytes) -> TrajectoryDataset:
    if raw[:4] != MAGIC:
        raise FormatError("not an NSFD dataset (bad magic)")
    version, P, T, n_mu = struct.unpack_from("<IQQI", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = 4 + 24
    mu = struct.unpack_from(f"<{n_mu}d", raw, off)
    off += 8 * n_mu
    dt, dx = struct.unpack_from("<dd", raw, off)
    off += 16
    if len(raw) != expected_size(P, T, n_mu):
        raise FormatError(f"dataset length {len(raw)} does not match header (expected {expected_size(P, T, n_mu)})")
    ref = np.frombuffer(raw, dtype=_F64, count=3 * P, offset=off).reshape(P, 3)
    off += 24 * P
    body = np.frombuffer(raw, dtype=_F64, count=T * P * 18, offset=off).reshape(T, P, 18)
    return TrajectoryDataset(
        reference=ref.astype(float),
        positions=body[..., :3].astype(float),
        stress=body[..., 3:9].astype(float),
        affine=body[..., 9:].astype(float),
        mu=mu,
        dt=dt,
        dx=dx,
    )


def read_dataset(path) -> TrajectoryDataset:
    return parse_dataset(Path(path).read_bytes())
