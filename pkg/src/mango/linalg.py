"""Dense real-matrix core: matrix exponential, its Frechet derivative, and
block-diagonal transport operators.

Matrices are plain ``float64`` numpy arrays. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``m`` to a finite 2-D float64 array (copy-free when possible)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} has non-finite entries")
    return a


def _as_square(m, name: str = "matrix") -> np.ndarray:
    a = as_matrix(m, name)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    return a


# Higham (2005) scaling-and-squaring: Pade orders and their 1-norm thresholds.
_PADE_THETA = (
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
)
_THETA_13 = 5.371920351148152

_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
         960960.0, 16380.0, 182.0, 1.0),
}


def _pade_uv(a: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE_COEFFS[order]
    ident = np.eye(a.shape[0])
    a2 = a @ a
    if order == 13:
        a4 = a2 @ a2
        a6 = a4 @ a2
        u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
        v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
             + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
        return u, v
    # even powers I, A^2, A^4, ...
    powers = [ident, a2]
    for _ in range(2, (order + 1) // 2):
        powers.append(powers[-1] @ a2)
    u_inner = sum(b[2 * k + 1] * p for k, p in enumerate(powers))
    v = sum(b[2 * k] * p for k, p in enumerate(powers))
    return a @ u_inner, v


def expm(m) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a diagonal Pade core."""
    a = _as_square(m)
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    norm1 = np.linalg.norm(a, 1)
    for order, theta in _PADE_THETA:
        if norm1 <= theta:
            u, v = _pade_uv(a, order)
            return np.linalg.solve(v - u, v + u)
    s = max(0, int(np.ceil(np.log2(norm1 / _THETA_13)))) if norm1 > 0 else 0
    u, v = _pade_uv(a / 2.0**s, 13)
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    return r


def expm_frechet(m, e) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(expm(M), L(M, E))`` via the exponential of ``[[M, E], [0, M]]``."""
    a = _as_square(m, "M")
    d = _as_square(e, "E")
    if a.shape != d.shape:
        raise DimensionError(f"shape mismatch: M {a.shape} vs E {d.shape}")
    n = a.shape[0]
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = a
    big[n:, n:] = a
    big[:n, n:] = d
    x = expm(big)
    return x[:n, :n].copy(), x[:n, n:].copy()


def expm_frechet_adjoint(m, w) -> np.ndarray:
    """Adjoint of the Frechet derivative under the trace inner product: L(M^T, W)."""
    a = _as_square(m, "M")
    g = _as_square(w, "W")
    if a.shape != g.shape:
        raise DimensionError(f"shape mismatch: M {a.shape} vs W {g.shape}")
    return expm_frechet(a.T, g)[1]


def frobenius_norm_sq(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sum(a * a))


def trace_inner(a, b) -> float:
    """<A, B> = trace(B^T A)."""
    return float(np.sum(np.asarray(a) * np.asarray(b)))


@dataclass
class BlockDiagOperator:
    """Partitioned L x L operator with one square block per transformation.

    ``fill`` is the diagonal value on coordinates not covered by any block:
    0 for generators (A), 1 for group elements (expm(alpha A)).
    """

    latent_dim: int
    offsets: list[int]
    blocks: list[np.ndarray]
    fill: float = 0.0

    def __post_init__(self):
        self.offsets = [int(o) for o in self.offsets]
        self.blocks = [_as_square(b, f"block {i}") for i, b in enumerate(self.blocks)]
        if len(self.offsets) != len(self.blocks):
            raise DimensionError("offsets and blocks differ in length")
        end = 0
        for off, blk in zip(self.offsets, self.blocks):
            if off < end:
                raise DimensionError(f"block at offset {off} overlaps the previous block")
            end = off + blk.shape[0]
        if end > self.latent_dim:
            raise DimensionError(f"blocks extend to {end} > latent_dim {self.latent_dim}")

    @classmethod
    def contiguous(cls, latent_dim: int, sizes: Sequence[int], rng=None, scale: float = 0.0):
        """Blocks packed from coordinate 0; entries ~ N(0, scale^2) when ``rng`` is given."""
        offsets, blocks, off = [], [], 0
        for b in sizes:
            offsets.append(off)
            if rng is None or scale == 0.0:
                blocks.append(np.zeros((b, b)))
            else:
                blocks.append(scale * rng.standard_normal((b, b)))
            off += b
        return cls(latent_dim, offsets, blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> list[int]:
        return [b.shape[0] for b in self.blocks]

    def block_slice(self, m: int) -> slice:
        return slice(self.offsets[m], self.offsets[m] + self.blocks[m].shape[0])

    def covered(self) -> np.ndarray:
        mask = np.zeros(self.latent_dim, dtype=bool)
        for m in range(self.n_blocks):
            mask[self.block_slice(m)] = True
        return mask

    def embed(self, m: int) -> np.ndarray:
        """Block ``m`` alone, embedded in an L x L zero matrix."""
        out = np.zeros((self.latent_dim, self.latent_dim))
        s = self.block_slice(m)
        out[s, s] = self.blocks[m]
        return out

    def to_dense(self) -> np.ndarray:
        out = np.diag(np.where(self.covered(), 0.0, self.fill))
        for m in range(self.n_blocks):
            s = self.block_slice(m)
            out[s, s] = self.blocks[m]
        return out

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Multiply latent vector(s) ``z`` (shape (L,) or (N, L)) by the dense operator."""
        z = np.asarray(z, dtype=np.float64)
        out = z * np.where(self.covered(), 0.0, self.fill)
        for m in range(self.n_blocks):
            s = self.block_slice(m)
            out[..., s] = z[..., s] @ self.blocks[m].T
        return out

    def copy(self) -> "BlockDiagOperator":
        return BlockDiagOperator(self.latent_dim, list(self.offsets),
                                 [b.copy() for b in self.blocks], self.fill)

    def same_layout(self, other: "BlockDiagOperator") -> bool:
        return (self.latent_dim == other.latent_dim and self.offsets == other.offsets
                and self.sizes == other.sizes)

    def compose(self, other: "BlockDiagOperator") -> "BlockDiagOperator":
        """Matrix product ``self @ other`` for operators sharing a block layout."""
        if not self.same_layout(other):
            raise DimensionError("operators have different block layouts")
        blocks = [a @ b for a, b in zip(self.blocks, other.blocks)]
        return BlockDiagOperator(self.latent_dim, list(self.offsets), blocks,
                                 self.fill * other.fill)

    def pairwise_inner(self) -> np.ndarray:
        """Gram matrix of trace inner products between the embedded blocks."""
        embedded = [self.embed(m) for m in range(self.n_blocks)]
        g = np.zeros((self.n_blocks, self.n_blocks))
        for i, a in enumerate(embedded):
            for j, b in enumerate(embedded):
                g[i, j] = trace_inner(a, b)
        return g

    def is_disentangled(self) -> bool:
        g = self.pairwise_inner()
        return bool(np.all(g[~np.eye(len(g), dtype=bool)] == 0.0))


def block_expm(op: BlockDiagOperator, alpha: float) -> BlockDiagOperator:
    """expm(alpha * A) computed blockwise; uncovered coordinates act as identity."""
    blocks = [expm(alpha * b) for b in op.blocks]
    return BlockDiagOperator(op.latent_dim, list(op.offsets), blocks, fill=1.0)
