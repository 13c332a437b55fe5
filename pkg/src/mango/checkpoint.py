"""Versioned binary checkpoints.

Layout (little-endian):

    magic  b"MANGOCKP"
    u32    format version
    u32    header length, then that many bytes of UTF-8 JSON (sorted keys)
    arrays in declaration order: u32 ndim, u32 dims..., float64 data
           (encoder W, b per layer; decoder W, b per layer; operator blocks)
    u32    CRC-32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .linalg import BlockDiagOperator
from .model import MangoModel, TrainConfig
from .nn import Autoencoder, Layer, Mlp
from .transforms import TransformFamily

MAGIC = b"MANGOCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: MangoModel
    config: TrainConfig
    rng_state: dict | None = None
    epoch: int = 0


def _pack_array(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    return (struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
            + np.ascontiguousarray(a).tobytes())


def _mlp_meta(net: Mlp) -> list:
    return [[l.weight.shape[0], l.weight.shape[1], l.activation] for l in net.layers]


def to_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    header = {
        "config": ckpt.config.to_dict(),
        "families": [asdict(f) for f in model.families],
        "latent_dim": model.operator.latent_dim,
        "offsets": model.operator.offsets,
        "sizes": model.operator.sizes,
        "encoder": _mlp_meta(model.ae.encoder),
        "decoder": _mlp_meta(model.ae.decoder),
        "slope": model.ae.encoder.slope,
        "rng": ckpt.rng_state,
        "epoch": ckpt.epoch,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hjson)), hjson]
    for p in model.ae.params():
        parts.append(_pack_array(p))
    for blk in model.operator.blocks:
        parts.append(_pack_array(blk))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        ndim = self.u32()
        dims = tuple(struct.unpack(f"<{ndim}I", self.take(4 * ndim)))
        if dims != tuple(shape):
            raise CheckpointError(f"array shape {dims} does not match header {tuple(shape)}")
        count = int(np.prod(dims)) if dims else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    rd = _Reader(body)
    rd.take(len(MAGIC))
    version = rd.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    header = json.loads(rd.take(rd.u32()).decode("utf-8"))
    cfg = TrainConfig.from_dict(header["config"])
    dtype = np.dtype(cfg.dtype)

    def read_mlp(meta) -> Mlp:
        layers = []
        for out_dim, in_dim, act in meta:
            w = rd.array((out_dim, in_dim)).astype(dtype)
            b = rd.array((out_dim,)).astype(dtype)
            layers.append(Layer(w, b, act))
        return Mlp(layers, header["slope"])

    enc = read_mlp(header["encoder"])
    dec = read_mlp(header["decoder"])
    blocks = [rd.array((s, s)) for s in header["sizes"]]
    if rd.pos != len(body):
        raise CheckpointError(f"{len(body) - rd.pos} unexpected trailing bytes")
    op = BlockDiagOperator(header["latent_dim"], header["offsets"], blocks)
    fams = [TransformFamily(**f) for f in header["families"]]
    model = MangoModel(Autoencoder(enc, dec), op, fams)
    return Checkpoint(model, cfg, header["rng"], header["epoch"])


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
