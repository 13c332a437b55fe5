"""Scalar-parameterized image transformations h(alpha, img), alpha in [-1, 1].

Images are (H, W) float arrays in [0, 1]; stacks of shape (N, H, W) are
transformed image by image with the same alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("rotate", "thicken", "blur")


@dataclass(frozen=True)
class TransformFamily:
    kind: str
    theta_max: float = 30.0  # degrees, rotate
    scale: float = 1.0  # mix scale s, thicken
    radius: int = 1  # disc radius r, thicken
    sigma_max: float = 2.0  # pixels, blur

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")

    @property
    def name(self) -> str:
        return self.kind


def family(kind: str) -> TransformFamily:
    return TransformFamily(kind)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counterclockwise rotation about the image center, bilinear, zero background."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    # y axis points up for the counterclockwise convention
    u = cols - cx
    v = cy - rows
    us = c * u + s * v
    vs = -s * u + c * v
    src_c = us + cx
    src_r = cy - vs
    return _bilinear(img, src_r, src_c)


def _bilinear(img: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    out = np.zeros(img.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = img[..., np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += np.where(ok, wr * wc, 0.0) * vals
    return out


def _disc_offsets(radius: int) -> list[tuple[int, int]]:
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]


def _rank_filter(img: np.ndarray, radius: int, op) -> np.ndarray:
    """Grayscale max/min over a disc; out-of-image samples count as background (0)."""
    h, w = img.shape[-2:]
    pad = np.zeros(img.shape[:-2] + (h + 2 * radius, w + 2 * radius))
    pad[..., radius:radius + h, radius:radius + w] = img
    out = None
    for dy, dx in _disc_offsets(radius):
        win = pad[..., radius + dy:radius + dy + h, radius + dx:radius + dx + w]
        out = win.copy() if out is None else op(out, win)
    return out


def dilate(img: np.ndarray, radius: int = 1) -> np.ndarray:
    return _rank_filter(np.asarray(img, dtype=np.float64), radius, np.maximum)


def erode(img: np.ndarray, radius: int = 1) -> np.ndarray:
    return _rank_filter(np.asarray(img, dtype=np.float64), radius, np.minimum)


def thicken(img: np.ndarray, alpha: float, scale: float = 1.0, radius: int = 1) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    mix = abs(alpha) * scale
    target = dilate(img, radius) if alpha >= 0 else erode(img, radius)
    return (1.0 - mix) * img + mix * target


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at 3 sigma."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    h, w = img.shape[-2:]
    pad = np.zeros(img.shape[:-2] + (h, w + 2 * r))
    pad[..., r:r + w] = img
    tmp = sum(k[i] * pad[..., i:i + w] for i in range(len(k)))
    pad = np.zeros(img.shape[:-2] + (h + 2 * r, w))
    pad[..., r:r + h, :] = tmp
    return sum(k[i] * pad[..., i:i + h, :] for i in range(len(k)))


def apply_unchecked(fam: TransformFamily, alpha: float, img: np.ndarray) -> np.ndarray:
    """Like :func:`apply` but alpha may leave [-1, 1] (extrapolation)."""
    img = np.asarray(img, dtype=np.float64)
    if alpha == 0:
        return img.copy()
    if fam.kind == "rotate":
        out = rotate(img, alpha * fam.theta_max)
    elif fam.kind == "thicken":
        out = thicken(img, alpha, fam.scale, fam.radius)
    else:
        out = blur(img, abs(alpha) * fam.sigma_max)
    return np.clip(out, 0.0, 1.0)


def apply(fam: TransformFamily, alpha: float, img: np.ndarray) -> np.ndarray:
    if not abs(alpha) <= 1.0:
        raise ValueError(f"alpha must lie in [-1, 1], got {alpha}")
    return apply_unchecked(fam, alpha, img)


def apply_each(fam: TransformFamily, alphas: np.ndarray, imgs: np.ndarray,
               checked: bool = True) -> np.ndarray:
    """Per-image alphas: ``out[i] = h(alphas[i], imgs[i])``."""
    fn = apply if checked else apply_unchecked
    return np.stack([fn(fam, float(a), im) for a, im in zip(alphas, imgs)])
