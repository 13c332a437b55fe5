"""Datasets: IDX (MNIST) parsing, synthetic generators, seeded batching."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) in [0, 1]
    source: str = ""
    seed: int | None = None
    factors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3 or len(self.images) == 0:
            raise ValueError(f"expected a non-empty (N, H, W) stack, got {self.images.shape}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def dim(self) -> int:
        return self.images.shape[1] * self.images.shape[2]

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.source, self.seed,
                       {k: v[:n] for k, v in self.factors.items()})


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX image file into an (N, H, W) uint8 array."""
    if len(raw) < 4:
        raise IdxParseError("truncated header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxParseError(f"unexpected magic 0x{magic:08x}", 0)
    if len(raw) < 16:
        raise IdxParseError("truncated dimension header", len(raw))
    n, h, w = struct.unpack(">III", raw[4:16])
    need = 16 + n * h * w
    if len(raw) < need:
        raise IdxParseError(f"truncated pixel data: need {need} bytes, have {len(raw)}", len(raw))
    if len(raw) > need:
        raise IdxParseError(f"dimension mismatch: {len(raw) - need} trailing bytes", need)
    return np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def load_idx(path, limit: int | None = None) -> Dataset:
    """Load an IDX3 image file (optionally gzip-compressed); pixels scaled by 1/255."""
    pixels = parse_idx(_read_bytes(path))
    if limit is not None:
        pixels = pixels[:limit]
    return Dataset(pixels.astype(np.float64) / 255.0, source=f"idx:{Path(path).name}")


def encode_idx(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.dtype != np.uint8:
        raise ValueError("expected an (N, H, W) uint8 array")
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, *pixels.shape) + pixels.tobytes()


def write_idx(path, pixels: np.ndarray, compress: bool = False) -> None:
    """Write ``pixels`` as IDX3. Float input in [0, 1] is scaled and rounded to bytes."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    raw = encode_idx(pixels)
    if compress:
        raw = gzip.compress(raw, mtime=0)
    Path(path).write_bytes(raw)


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "rotating-bar"  # or "rotating-blob"
    count: int = 2000
    height: int = 28
    width: int = 28
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rotating-bar", "rotating-blob"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise level must lie in [0, 0.5)")
        if self.count < 1:
            raise ValueError("count must be positive")


def bar_raster(angle: float, h: int = 28, w: int = 28, half_length: float = 9.0,
               half_width: float = 1.5) -> np.ndarray:
    """Anti-aliased bar through the image center at ``angle`` radians (counterclockwise)."""
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u = cols - (w - 1) / 2.0
    v = (h - 1) / 2.0 - rows
    along = u * math.cos(angle) + v * math.sin(angle)
    perp = -u * math.sin(angle) + v * math.cos(angle)
    a = np.clip(half_length + 0.5 - np.abs(along), 0.0, 1.0)
    p = np.clip(half_width + 0.5 - np.abs(perp), 0.0, 1.0)
    return a * p


def blob_raster(angle: float, h: int = 28, w: int = 28, radius: float = 7.0,
                sx: float = 3.0, sy: float = 1.8) -> np.ndarray:
    """Elongated Gaussian blob orbiting the center, placed at ``angle`` radians."""
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u = cols - (w - 1) / 2.0 - radius * math.cos(angle)
    v = (h - 1) / 2.0 - rows - radius * math.sin(angle)
    along = u * math.cos(angle) + v * math.sin(angle)
    perp = -u * math.sin(angle) + v * math.cos(angle)
    return np.exp(-0.5 * ((along / sx) ** 2 + (perp / sy) ** 2))


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    angles = rng.uniform(0.0, 2.0 * math.pi, size=spec.count)
    raster = bar_raster if spec.kind == "rotating-bar" else blob_raster
    imgs = np.stack([raster(a, spec.height, spec.width) for a in angles])
    if spec.noise > 0:
        imgs = np.clip(imgs + spec.noise * rng.standard_normal(imgs.shape), 0.0, 1.0)
    return Dataset(imgs, source=f"synthetic:{spec.kind}", seed=spec.seed,
                   factors={"angle": angles})


def batch_indices(n: int, batch_size: int, seed: int | np.random.Generator,
                  epochs: int = 1) -> Iterator[np.ndarray]:
    """Yield index arrays; reshuffled every epoch, final short batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def batches(ds: Dataset, batch_size: int, seed: int | np.random.Generator,
            epochs: int = 1) -> Iterator[np.ndarray]:
    for idx in batch_indices(len(ds), batch_size, seed, epochs):
        yield ds.images[idx]


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
