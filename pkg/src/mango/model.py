"""Jointly trained autoencoder and block-diagonal transport operators.

Per training pair (x, x~ = h_m(alpha, x)) with latents z = f(x), z~ = f(x~):

    T_m = ||z~ - expm(alpha A_m) z||^2 + gamma ||A_m||_F^2
    E   = ||x - g(f(x))||^2 + ||x~ - g(f(x~))||^2 + lambda T_m

``expm(alpha A_m)`` acts on the full latent vector: block m is transformed
and every other coordinate is left unchanged, so T_m also penalizes any
movement of z outside block m.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batch_indices
from .linalg import BlockDiagOperator, DomainError, block_expm, expm, expm_frechet_adjoint, frobenius_norm_sq
from .nn import Autoencoder, Optimizer
from .transforms import TransformFamily, apply, apply_each

log = logging.getLogger(__name__)

MAX_STEP_NORM = 20.0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, term: str, value: float):
        super().__init__(f"non-finite {term} ({value}) at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.term, self.value = epoch, batch, term, value


@dataclass
class TrainConfig:
    gamma: float = 1e-4
    lam: float = 1.0
    eta1: float = 1e-3
    eta2: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    latent_dim: int = 16
    block_sizes: tuple[int, ...] = (2, 2)
    seed: int = 0
    alpha_mode: str = "per-batch"  # or "per-sample"
    optimizer: str = "adam"
    init_scale: float = 0.01
    hidden: tuple[int, ...] = (256, 64)
    dtype: str = "float64"

    def __post_init__(self):
        self.block_sizes = tuple(int(b) for b in self.block_sizes)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if any(b < 1 for b in self.block_sizes):
            raise ValueError("block sizes must be positive")
        if sum(self.block_sizes) > self.latent_dim:
            raise ValueError(f"blocks need {sum(self.block_sizes)} latent coordinates, "
                             f"latent_dim is {self.latent_dim}")
        if self.alpha_mode not in ("per-batch", "per-sample"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_sizes"] = list(self.block_sizes)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MangoModel:
    ae: Autoencoder
    operator: BlockDiagOperator
    families: list[TransformFamily]

    def __post_init__(self):
        if len(self.families) != self.operator.n_blocks:
            raise ValueError("need exactly one transform family per operator block")
        if self.operator.latent_dim != self.ae.latent_dim:
            raise ValueError("operator latent_dim does not match the autoencoder code width")

    @classmethod
    def init(cls, data_dim: int, families: Sequence[TransformFamily], cfg: TrainConfig,
             rng: np.random.Generator) -> "MangoModel":
        if len(families) != len(cfg.block_sizes):
            raise ValueError("need one block size per family")
        ae = Autoencoder.init(data_dim, cfg.latent_dim, rng, cfg.hidden, np.dtype(cfg.dtype))
        op = BlockDiagOperator.contiguous(cfg.latent_dim, cfg.block_sizes, rng, cfg.init_scale)
        return cls(ae, op, list(families))

    @property
    def n_ops(self) -> int:
        return self.operator.n_blocks

    def family_index(self, name: str) -> int:
        for i, fam in enumerate(self.families):
            if fam.name == name:
                return i
        raise KeyError(f"no operator for family {name!r}")

    def copy(self) -> "MangoModel":
        return MangoModel(self.ae.copy(), self.operator.copy(), list(self.families))

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.ae.encoder(x), dtype=np.float64)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.ae.decoder(np.asarray(z, dtype=self.ae.encoder.layers[0].weight.dtype)),
                          dtype=np.float64)


def transport_loss(model: MangoModel, m: int, z, z_tilde, alpha, gamma: float):
    """T_m summed over the rows of ``z`` / ``z_tilde``.

    ``alpha`` is a scalar or one value per row. Returns
    ``(loss, dT/dA_m, dT/dz, dT/dz~)``; each pair contributes its own
    ``gamma ||A_m||^2`` term.
    """
    op = model.operator
    if not 0 <= m < op.n_blocks:
        raise IndexError(f"operator index {m} out of range for {op.n_blocks} operators")
    z = np.asarray(z, dtype=np.float64)
    zt = np.asarray(z_tilde, dtype=np.float64)
    single = z.ndim == 1
    z, zt = np.atleast_2d(z), np.atleast_2d(zt)
    if z.shape != zt.shape or z.shape[1] != op.latent_dim:
        raise ValueError(f"latent shapes {z.shape}, {zt.shape} do not match L={op.latent_dim}")
    n = len(z)
    alphas = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,))
    a_m = op.blocks[m]
    s = op.block_slice(m)

    resid = zt - z  # identity action off-block
    grad_a = np.zeros_like(a_m)
    grad_z = np.empty_like(z)
    # rows sharing an alpha share one exponential and one adjoint
    for val in np.unique(alphas):
        rows = np.flatnonzero(alphas == val)
        p = expm(val * a_m)
        r_blk = zt[rows, s] - z[rows, s] @ p.T
        resid[rows, s] = r_blk
        g = -2.0 * r_blk.T @ z[rows, s]
        if val != 0.0:
            grad_a += val * expm_frechet_adjoint(val * a_m, g)
        grad_z[rows, s] = -2.0 * r_blk @ p
    off = np.ones(op.latent_dim, dtype=bool)
    off[s] = False
    grad_z[:, off] = -2.0 * resid[:, off]
    grad_zt = 2.0 * resid
    loss = float(np.sum(resid * resid)) + n * gamma * frobenius_norm_sq(a_m)
    grad_a += 2.0 * n * gamma * a_m
    if single:
        return loss, grad_a, grad_z[0], grad_zt[0]
    return loss, grad_a, grad_z, grad_zt


@dataclass
class PairGroup:
    """Transformed copies of some rows of a base batch, all under operator ``m``."""

    m: int
    rows: np.ndarray
    x_tilde: np.ndarray
    alphas: np.ndarray


@dataclass
class StepResult:
    loss: float
    recon: float  # summed squared error over all reconstructed images
    n_recon: int
    transport: dict[int, float]  # summed T_m
    n_pairs: dict[int, int]
    ae_grads: list[np.ndarray]
    op_grads: dict[int, np.ndarray]


def loss_and_grads(model: MangoModel, x: np.ndarray, groups: Sequence[PairGroup],
                   lam: float, gamma: float, x_weight: np.ndarray | None = None) -> StepResult:
    """Summed E over all pairs, with gradients w.r.t. theta and every used A_m.

    ``x_weight[i]`` is how many pairs reuse base row i (its reconstruction
    term appears once per pair); defaults to that count, or 1 with no pairs.
    """
    ae = model.ae
    x = np.atleast_2d(np.asarray(x))
    if x.shape[1] != ae.data_dim:
        raise ValueError(f"expected images of dimension {ae.data_dim}, got {x.shape[1]}")
    if x_weight is None:
        x_weight = np.zeros(len(x))
        for grp in groups:
            np.add.at(x_weight, grp.rows, 1.0)
        if not groups:
            x_weight[:] = 1.0
    enc_g = ae.encoder.zero_grads()
    dec_g = ae.decoder.zero_grads()

    zx, tape_x = ae.encoder.forward(x)
    xr, tape_xr = ae.decoder.forward(zx)
    res_x = xr - x
    sq_x = np.sum(res_x * res_x, axis=1)
    recon = float(np.sum(sq_x * x_weight))
    n_recon = int(x_weight.sum())
    dzx_transport = np.zeros(zx.shape, dtype=np.float64)
    transport, n_pairs, op_grads = {}, {}, {}
    total = recon

    for grp in groups:
        zt, tape_t = ae.encoder.forward(grp.x_tilde)
        xtr, tape_tr = ae.decoder.forward(zt)
        res_t = xtr - grp.x_tilde
        rec_t = float(np.sum(res_t * res_t))
        t_val, g_a, g_z, g_zt = transport_loss(model, grp.m, zx[grp.rows], zt, grp.alphas, gamma)
        _, dz_rec = ae.decoder.backward(tape_tr, 2.0 * res_t, dec_g)
        ae.encoder.backward(tape_t, dz_rec + lam * g_zt, enc_g)
        np.add.at(dzx_transport, grp.rows, lam * g_z)
        op_grads[grp.m] = op_grads.get(grp.m, 0.0) + lam * g_a
        transport[grp.m] = transport.get(grp.m, 0.0) + t_val
        n_pairs[grp.m] = n_pairs.get(grp.m, 0) + len(grp.rows)
        recon += rec_t
        n_recon += len(grp.rows)
        total += rec_t + lam * t_val

    _, dzx = ae.decoder.backward(tape_xr, 2.0 * res_x * x_weight[:, None], dec_g)
    ae.encoder.backward(tape_x, dzx + dzx_transport, enc_g)
    return StepResult(total, recon, n_recon, transport, n_pairs, enc_g + dec_g, op_grads)


def total_loss(model: MangoModel, x, x_tilde, m: int, alpha, lam: float, gamma: float):
    """E for one pair (or a batch of pairs); returns (E, theta grads, dE/dA_m)."""
    x = np.atleast_2d(x)
    x_tilde = np.atleast_2d(x_tilde)
    grp = PairGroup(m, np.arange(len(x)), x_tilde, np.broadcast_to(alpha, (len(x),)))
    res = loss_and_grads(model, x, [grp], lam, gamma)
    return res.loss, res.ae_grads, res.op_grads[m]


class Trainer:
    """Owns the optimizer state for one model; ``step`` performs one batch update."""

    def __init__(self, model: MangoModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt_theta = Optimizer(cfg.optimizer, cfg.eta2)
        self.opt_ops = [Optimizer(cfg.optimizer, cfg.eta1) for _ in range(model.n_ops)]
        self.rejected = 0

    def step(self, x: np.ndarray, groups: Sequence[PairGroup],
             x_weight: np.ndarray | None = None) -> StepResult:
        cfg, model = self.cfg, self.model
        res = loss_and_grads(model, x, groups, cfg.lam, cfg.gamma, x_weight)
        for grp in groups:
            m = grp.m
            if m not in res.op_grads:
                continue
            grad = res.op_grads.pop(m)
            self._update_operator(m, grad, float(np.max(np.abs(grp.alphas))))
        self.opt_theta.step(model.ae.params(), res.ae_grads)
        model.ae.bump()
        return res

    def _update_operator(self, m: int, grad: np.ndarray, alpha_max: float) -> None:
        block = self.model.operator.blocks[m]
        opt = self.opt_ops[m]
        saved = (block.copy(), [a.copy() for a in opt.m], [a.copy() for a in opt.v], opt.t)
        opt.step([block], [grad])
        if np.sqrt(frobenius_norm_sq(alpha_max * block)) > MAX_STEP_NORM:
            block[...] = saved[0]
            opt.m, opt.v, opt.t = saved[1], saved[2], saved[3]
            opt.lr /= 2.0
            self.rejected += 1
            log.warning("operator %d step rejected; eta1 halved to %g", m, opt.lr)


def seed_streams(seed: int):
    init, shuffle, alpha = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(alpha))


def init_model(data_dim: int, families: Sequence[TransformFamily], cfg: TrainConfig) -> MangoModel:
    return MangoModel.init(data_dim, families, cfg, seed_streams(cfg.seed)[0])


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def transport_means(self, m: int) -> list[float]:
        return [r[f"transport_loss_{m + 1}"] for r in self.rows]

    def write_csv(self, path, n_ops: int) -> None:
        cols = ["epoch", "recon_loss"] + [f"transport_loss_{m + 1}" for m in range(n_ops)]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def train(model: MangoModel, ds: Dataset, cfg: TrainConfig,
          callbacks: Sequence[Callable[[MangoModel, int, int], None]] = (),
          rngs: tuple[np.random.Generator, np.random.Generator] | None = None):
    """One-phase training: every batch updates each A_m in turn, then theta.

    Returns ``(model, history, trainer)``; the model is updated in place.
    """
    cfg.validate()
    if list(model.operator.sizes) != list(cfg.block_sizes):
        raise ValueError("model block sizes differ from the config")
    if rngs is None:
        _, shuffle_rng, alpha_rng = seed_streams(cfg.seed)
    else:
        shuffle_rng, alpha_rng = rngs
    trainer = Trainer(model, cfg)
    history = History()
    images = ds.images
    flat = ds.flat()
    n_ops = model.n_ops
    for epoch in range(1, cfg.epochs + 1):
        sums = {"recon": 0.0, "n_recon": 0, "t": np.zeros(n_ops), "n_t": np.zeros(n_ops)}
        order = batch_indices(len(ds), cfg.batch_size, shuffle_rng)
        for b, idx in enumerate(order):
            groups = []
            for m, fam in enumerate(model.families):
                if cfg.alpha_mode == "per-batch":
                    a = float(alpha_rng.uniform(-1.0, 1.0))
                    xt = apply(fam, a, images[idx])
                    alphas = np.full(len(idx), a)
                else:
                    alphas = alpha_rng.uniform(-1.0, 1.0, size=len(idx))
                    xt = apply_each(fam, alphas, images[idx])
                groups.append(PairGroup(m, np.arange(len(idx)), xt.reshape(len(idx), -1), alphas))
            try:
                # overflow is caught by the finiteness checks below
                with np.errstate(over="ignore", invalid="ignore"):
                    res = trainer.step(flat[idx], groups)
            except DomainError as exc:
                raise TrainingDiverged(epoch, b, "latent codes", float("nan")) from exc
            if not np.isfinite(res.recon):
                raise TrainingDiverged(epoch, b, "reconstruction loss", res.recon)
            for m, t in res.transport.items():
                if not np.isfinite(t):
                    raise TrainingDiverged(epoch, b, f"transport loss {m + 1}", t)
                sums["t"][m] += t
                sums["n_t"][m] += res.n_pairs[m]
            if not np.isfinite(res.loss):
                raise TrainingDiverged(epoch, b, "total loss", res.loss)
            sums["recon"] += res.recon
            sums["n_recon"] += res.n_recon
            for cb in callbacks:
                cb(model, epoch, b)
        row = {"epoch": epoch, "recon_loss": sums["recon"] / max(sums["n_recon"], 1)}
        for m in range(n_ops):
            row[f"transport_loss_{m + 1}"] = float(sums["t"][m] / max(sums["n_t"][m], 1))
        history.rows.append(row)
        log.info("epoch %d: %s", epoch, row)
    return model, history, trainer


def train_autoencoder(ae: Autoencoder, ds: Dataset, cfg: TrainConfig) -> list[float]:
    """Plain reconstruction training with the same seed streams as :func:`train`.

    Returns the per-epoch mean squared reconstruction error per image.
    """
    _, shuffle_rng, _ = seed_streams(cfg.seed)
    opt = Optimizer(cfg.optimizer, cfg.eta2)
    flat = ds.flat()
    curve = []
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in batch_indices(len(ds), cfg.batch_size, shuffle_rng):
            x = flat[idx]
            z, t_enc = ae.encoder.forward(x)
            xr, t_dec = ae.decoder.forward(z)
            r = xr - x
            total += float(np.sum(np.sum(r * r, axis=1)))
            count += len(idx)
            g_dec, dz = ae.decoder.backward(t_dec, 2.0 * r)
            g_enc, _ = ae.encoder.backward(t_enc, dz)
            opt.step(ae.params(), g_enc + g_dec)
            ae.bump()
        curve.append(total / count)
    return curve


def transform_latent(model: MangoModel, z, coeffs: Sequence[tuple[int, float]]) -> np.ndarray:
    """Apply expm(sum_m alpha_m A_m) to latent(s) ``z`` via per-block exponentials."""
    seen = set()
    for m, _ in coeffs:
        if m in seen:
            raise ValueError(f"duplicate operator index {m}")
        if not 0 <= m < model.n_ops:
            raise IndexError(f"operator index {m} out of range")
        seen.add(m)
    out = np.array(z, dtype=np.float64)
    op = model.operator
    for m, a in coeffs:
        s = op.block_slice(m)
        out[..., s] = out[..., s] @ expm(a * op.blocks[m]).T
    return out


def transport(model: MangoModel, z, m: int, alpha: float, steps: int = 1) -> np.ndarray:
    """Move latent(s) along operator m by ``alpha`` in ``steps`` equal increments."""
    g = block_expm(BlockDiagOperator(model.operator.latent_dim, [model.operator.offsets[m]],
                                     [model.operator.blocks[m]]), alpha / steps)
    out = np.array(z, dtype=np.float64)
    for _ in range(steps):
        out = g.apply(out)
    return out
