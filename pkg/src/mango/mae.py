"""Dense-dictionary transport baseline (MAE-style) for runtime comparison.

Each pair (z, z~) is explained as z~ ~ expm(sum_m c_m A_m) z with every A_m a
dense L x L matrix. Coefficients come from an l1-regularized inner solve:

    F(c) = 1/2 ||z~ - expm(sum_m c_m A_m) z||^2 + gamma/2 sum_m ||A_m||_F^2 + zeta ||c||_1

Only the per-batch step is provided; the full multi-phase schedule is not.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .linalg import expm, expm_frechet, expm_frechet_adjoint, frobenius_norm_sq
from .nn import Autoencoder, Optimizer


@dataclass
class DenseOperatorDict:
    operators: np.ndarray  # (M, L, L)

    def __post_init__(self):
        self.operators = np.asarray(self.operators, dtype=np.float64)
        if self.operators.ndim != 3 or self.operators.shape[1] != self.operators.shape[2]:
            raise ValueError(f"expected (M, L, L) operators, got {self.operators.shape}")
        if not np.all(np.isfinite(self.operators)):
            raise ValueError("operators have non-finite entries")

    @classmethod
    def random(cls, n_ops: int, latent_dim: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(scale * rng.standard_normal((n_ops, latent_dim, latent_dim)))

    @property
    def n_ops(self) -> int:
        return self.operators.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.operators.shape[1]

    def combine(self, c: np.ndarray) -> np.ndarray:
        return np.tensordot(c, self.operators, axes=1)


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def objective(d: DenseOperatorDict, z, zt, c, zeta: float, gamma: float) -> float:
    r = zt - expm(d.combine(c)) @ z
    shrink = 0.5 * gamma * sum(frobenius_norm_sq(a) for a in d.operators)
    return 0.5 * float(r @ r) + shrink + zeta * float(np.abs(c).sum())


def _smooth(d: DenseOperatorDict, z, zt, c) -> float:
    r = zt - expm(d.combine(c)) @ z
    return 0.5 * float(r @ r)


def _smooth_grad(d: DenseOperatorDict, z, zt, c) -> tuple[float, np.ndarray]:
    """Value and gradient of 1/2||r||^2 in c, one directional derivative per operator."""
    a = d.combine(c)
    grad = np.empty(d.n_ops)
    r = None
    for m in range(d.n_ops):
        t, dt = expm_frechet(a, d.operators[m])
        if r is None:
            r = zt - t @ z
        grad[m] = -float(r @ (dt @ z))
    if r is None:
        r = zt - expm(a) @ z
    return 0.5 * float(r @ r), grad


@dataclass
class InferenceResult:
    c: np.ndarray
    objective: float
    iters: int
    converged: bool
    history: list[float] = field(default_factory=list)


def infer_coefficients(d: DenseOperatorDict, z, z_tilde, zeta: float = 0.01, gamma: float = 0.0,
                       max_iters: int = 50, tol: float = 1e-6, c0=None,
                       step: float = 1.0) -> InferenceResult:
    """ISTA with backtracking. Non-convergence is reported, not raised."""
    z = np.asarray(z, dtype=np.float64)
    zt = np.asarray(z_tilde, dtype=np.float64)
    if z.shape != (d.latent_dim,) or zt.shape != z.shape:
        raise ValueError("latents must be vectors of length L")
    c = np.zeros(d.n_ops) if c0 is None else np.array(c0, dtype=np.float64)
    shrink = 0.5 * gamma * sum(frobenius_norm_sq(a) for a in d.operators)
    fval = _smooth(d, z, zt, c)
    hist = [fval + shrink + zeta * np.abs(c).sum()]
    best_c, best = c.copy(), hist[0]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        fval, grad = _smooth_grad(d, z, zt, c)
        t = step
        while True:
            cand = soft_threshold(c - t * grad, t * zeta)
            diff = cand - c
            fcand = _smooth(d, z, zt, cand)
            if fcand <= fval + grad @ diff + (diff @ diff) / (2.0 * t) or t < 1e-12:
                break
            t *= 0.5
        c = cand
        total = fcand + shrink + zeta * np.abs(c).sum()
        hist.append(total)
        if total < best:
            best_c, best = c.copy(), total
        if np.linalg.norm(diff) < tol:
            converged = True
            break
    return InferenceResult(best_c, best, it if max_iters > 0 else 0, converged, hist)


@dataclass
class MaeConfig:
    zeta: float = 0.01
    gamma: float = 1e-4
    lam: float = 1.0
    max_iters: int = 50
    tol: float = 1e-6
    eta_ops: float = 1e-3
    eta_net: float = 1e-3


@dataclass
class MaeStepResult:
    seconds: float
    recon: float
    transport: float
    inner_iters: int


class MaeStepper:
    def __init__(self, d: DenseOperatorDict, ae: Autoencoder, cfg: MaeConfig):
        self.d, self.ae, self.cfg = d, ae, cfg
        self.opt_ops = Optimizer("adam", cfg.eta_ops)
        self.opt_net = Optimizer("adam", cfg.eta_net)

    def step(self, x: np.ndarray, x_tilde: np.ndarray) -> MaeStepResult:
        return mae_batch_step(self.d, self.ae, x, x_tilde, self.cfg, self.opt_ops, self.opt_net)


def mae_batch_step(d: DenseOperatorDict, ae: Autoencoder, x: np.ndarray, x_tilde: np.ndarray,
                   cfg: MaeConfig, opt_ops: Optimizer | None = None,
                   opt_net: Optimizer | None = None) -> MaeStepResult:
    """Encode pairs, infer coefficients per pair, then one gradient step on operators and network."""
    start = time.perf_counter()
    if x.shape != x_tilde.shape:
        raise ValueError("x and x_tilde must have the same shape")
    opt_ops = opt_ops or Optimizer("adam", cfg.eta_ops)
    opt_net = opt_net or Optimizer("adam", cfg.eta_net)
    enc_g, dec_g = ae.encoder.zero_grads(), ae.decoder.zero_grads()
    z, tz = ae.encoder.forward(x)
    zt, tzt = ae.encoder.forward(x_tilde)
    xr, txr = ae.decoder.forward(z)
    xtr, txtr = ae.decoder.forward(zt)
    res_x, res_t = xr - x, xtr - x_tilde
    recon = float(np.sum(res_x * res_x) + np.sum(res_t * res_t))

    grad_ops = np.zeros_like(d.operators)
    dz = np.zeros(z.shape)
    dzt = np.zeros(zt.shape)
    transport, iters = 0.0, 0
    for i in range(len(z)):
        zi, zti = z[i].astype(np.float64), zt[i].astype(np.float64)
        inf = infer_coefficients(d, zi, zti, cfg.zeta, cfg.gamma, cfg.max_iters, cfg.tol)
        iters += inf.iters
        a = d.combine(inf.c)
        t = expm(a)
        r = zti - t @ zi
        transport += 0.5 * float(r @ r)
        # d(1/2||r||^2)/dA = L*(A, -r z^T); chain through A = sum_m c_m A_m
        adj = expm_frechet_adjoint(a, -np.outer(r, zi))
        grad_ops += cfg.lam * inf.c[:, None, None] * adj
        dz[i] = -cfg.lam * (t.T @ r)
        dzt[i] = cfg.lam * r
    grad_ops += cfg.lam * len(z) * cfg.gamma * d.operators
    transport += len(z) * 0.5 * cfg.gamma * float(np.sum(d.operators ** 2))

    _, dz_rec = ae.decoder.backward(txr, 2.0 * res_x, dec_g)
    _, dzt_rec = ae.decoder.backward(txtr, 2.0 * res_t, dec_g)
    ae.encoder.backward(tz, dz_rec + dz, enc_g)
    ae.encoder.backward(tzt, dzt_rec + dzt, enc_g)
    opt_ops.step([d.operators], [grad_ops])
    opt_net.step(ae.params(), enc_g + dec_g)
    ae.bump()
    return MaeStepResult(time.perf_counter() - start, recon, transport, iters)
