"""Checkpoint (``.nsf``) and latent-trajectory (``.lat``) binary formats.

Field file layout (little-endian)::

    magic     4s   b"NSF1"
    version   u32
    kind      1s   g | e | h | l
    pad       3x
    n_spec    u32, spec u32 * n_spec          architecture integers
    n_scalers u32, per scaler: dim u32, mean f64*dim, std f64*dim, flags u8*dim
    n_params  u64, theta f64 * n_params       in parameter-layout order

Latent sidecar::

    magic b"NSFL", version u32, r u32, n_frames u64, then per frame
    index u64 followed by r f64 values.

These functions only build and parse bytes; the command line layer owns the
filesystem.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, ModelCorruptionError
from .fields import NeuralAffineField, NeuralDeformationField, NeuralStressField
from .nn import MLP, Encoder, Standardizer

MAGIC = b"NSF1"
LAT_MAGIC = b"NSFL"
VERSION = 1
FIELD_FILES = {"g": "g.nsf", "e": "e.nsf", "h": "h.nsf", "l": "l.nsf"}


@dataclass
class FieldRecord:
    kind: str
    spec: tuple
    scalers: list
    theta: np.ndarray


def record_bytes(rec: FieldRecord) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), rec.kind.encode("ascii"), b"\0\0\0"]
    out.append(struct.pack(f"<I{len(rec.spec)}I", len(rec.spec), *rec.spec))
    out.append(struct.pack("<I", len(rec.scalers)))
    for sc in rec.scalers:
        out.append(struct.pack("<I", sc.dim))
        out.append(np.asarray(sc.mean, dtype="<f8").tobytes())
        out.append(np.asarray(sc.std, dtype="<f8").tobytes())
        out.append(np.asarray(sc.degenerate, dtype=np.uint8).tobytes())
    theta = np.asarray(rec.theta, dtype="<f8")
    out.append(struct.pack("<Q", theta.size))
    out.append(theta.tobytes())
    return b"".join(out)


def parse_record(raw: bytes) -> FieldRecord:
    try:
        if raw[:4] != MAGIC:
            raise FormatError("not an NSF1 checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        kind = raw[8:9].decode("ascii")
        off = 12
        (n_spec,) = struct.unpack_from("<I", raw, off)
        spec = struct.unpack_from(f"<{n_spec}I", raw, off + 4)
        off += 4 + 4 * n_spec
        (n_sc,) = struct.unpack_from("<I", raw, off)
        off += 4
        scalers = []
        for _ in range(n_sc):
            (dim,) = struct.unpack_from("<I", raw, off)
            off += 4
            mean = np.frombuffer(raw, "<f8", dim, off).astype(float)
            std = np.frombuffer(raw, "<f8", dim, off + 8 * dim).astype(float)
            flags = np.frombuffer(raw, np.uint8, dim, off + 16 * dim).astype(bool)
            off += 17 * dim
            scalers.append(Standardizer(mean, std, flags))
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if len(raw) != off + 8 * n:
            raise FormatError(f"checkpoint length {len(raw)} does not match header (expected {off + 8 * n})")
        theta = np.frombuffer(raw, "<f8", n, off).astype(float)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if not np.all(np.isfinite(theta)):
        raise ModelCorruptionError(f"checkpoint '{kind}' holds non-finite parameters")
    return FieldRecord(kind, tuple(spec), scalers, theta)


def _check_size(rec, layout):
    if rec.theta.size != layout.size:
        raise FormatError(f"'{rec.kind}' payload has {rec.theta.size} parameters, architecture needs {layout.size}")


def deformation_records(est: NeuralDeformationField):
    """``(g, e)`` records for a fitted deformation field."""
    dec, enc = est.decoder_, est.encoder_
    g = FieldRecord(
        "g",
        (est.latent_dim, dec.hidden_layers, dec.width, est.frame_stride, est.seed),
        [est.input_scaler_, est.output_scaler_],
        est.theta_,
    )
    e = FieldRecord(
        "e",
        (est.latent_dim, enc.n_points, enc.hidden, enc.channels, enc.kernel, enc.stride, enc.stop),
        [est.output_scaler_],
        est.encoder_theta_,
    )
    return g, e


def deformation_from_records(g: FieldRecord, e: FieldRecord) -> NeuralDeformationField:
    if g.kind != "g" or e.kind != "e":
        raise FormatError("expected a 'g' and an 'e' record")
    r, layers, width, stride, seed = g.spec
    r_e, n_points, hidden, channels, kernel, enc_stride, stop = e.spec
    if r_e != r:
        raise FormatError(f"decoder latent dim {r} does not match encoder latent dim {r_e}")
    est = NeuralDeformationField(latent_dim=r, width=width, hidden_layers=layers, encoder_hidden=hidden, frame_stride=stride, seed=seed)
    est.decoder_ = MLP(3, r, 3, layers, width)
    est.encoder_ = Encoder(n_points, r, hidden, channels, kernel, enc_stride, stop)
    _check_size(g, est.decoder_.layout)
    _check_size(e, est.encoder_.layout)
    est.input_scaler_, est.output_scaler_ = g.scalers
    est.theta_ = g.theta
    est.encoder_theta_ = e.theta
    return est


def regressor_record(est) -> FieldRecord:
    kind = "h" if isinstance(est, NeuralStressField) else "l"
    return FieldRecord(
        kind,
        (est.latent_dim, est.hidden_layers, est.width, int(est.mu_conditioning), est.n_mu_, est.frame_stride, est.seed),
        [est.input_scaler_, est.code_scaler_, est.output_scaler_],
        est.theta_,
    )


def regressor_from_record(rec: FieldRecord):
    cls = {"h": NeuralStressField, "l": NeuralAffineField}.get(rec.kind)
    if cls is None:
        raise FormatError(f"expected an 'h' or 'l' record, got '{rec.kind}'")
    r, layers, width, cond, n_mu, stride, seed = rec.spec
    est = cls(latent_dim=r, width=width, hidden_layers=layers, mu_conditioning=bool(cond), frame_stride=stride, seed=seed)
    est.n_mu_ = n_mu
    est.decoder_ = MLP(3, r + n_mu, cls._out_dim, layers, width)
    _check_size(rec, est.decoder_.layout)
    est.input_scaler_, est.code_scaler_, est.output_scaler_ = rec.scalers
    est.theta_ = rec.theta
    return est


def latents_bytes(latents, indices=None) -> bytes:
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    n, r = latents.shape
    idx = np.arange(n, dtype=np.uint64) if indices is None else np.asarray(indices, dtype=np.uint64)
    rows = np.empty(n, dtype=[("i", "<u8"), ("z", "<f8", (r,))])
    rows["i"] = idx
    rows["z"] = latents
    return LAT_MAGIC + struct.pack("<IIQ", VERSION, r, n) + rows.tobytes()


def parse_latents(raw: bytes):
    """Returns ``(indices, latents)``."""
    if raw[:4] != LAT_MAGIC:
        raise FormatError("not a latent trajectory file (bad magic)")
    version, r, n = struct.unpack_from("<IIQ", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported latent file version {version}")
    dtype = np.dtype([("i", "<u8"), ("z", "<f8", (r,))])
    if len(raw) != 20 + n * dtype.itemsize:
        raise FormatError("latent file length does not match header")
    rows = np.frombuffer(raw, dtype, n, 20)
    return rows["i"].astype(np.int64), rows["z"].astype(float)
