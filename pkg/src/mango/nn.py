"""Fully connected networks with explicit reverse-mode gradients.

Inputs are batched row-wise: a batch of N vectors is an (N, D) array. A
single vector of shape (D,) is also accepted and the result is squeezed back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = ("linear", "leaky_relu", "sigmoid")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class Tape:
    """Cached forward state of one pass through an :class:`Mlp`."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    outputs: list[np.ndarray]
    version: int
    squeeze: bool = False


class Mlp:
    """Stack of affine layers with per-layer activation tags."""

    def __init__(self, layers: Sequence[Layer], slope: float = LEAKY_SLOPE):
        self.layers = list(layers)
        self.slope = slope
        self.version = 0
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError(f"layer dims do not chain: {prev.shape} -> {nxt.shape}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ValueError("bias shape does not match weight rows")

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             dtype=np.float64, slope: float = LEAKY_SLOPE) -> "Mlp":
        """He-style uniform fan-in initialization, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
            layers.append(Layer(w, np.zeros(fan_out, dtype=dtype), act))
        return cls(layers, slope)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                   self.slope)

    def _act(self, name: str, x: np.ndarray) -> np.ndarray:
        if name == "leaky_relu":
            return leaky_relu(x, self.slope)
        if name == "sigmoid":
            return sigmoid(x)
        return x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {h.shape[1]}")
        h = h.astype(self.layers[0].weight.dtype, copy=False)
        inputs, preacts, outputs = [], [], []
        for layer in self.layers:
            inputs.append(h)
            a = h @ layer.weight.T + layer.bias
            h = self._act(layer.activation, a)
            preacts.append(a)
            outputs.append(h)
        tape = Tape(inputs, preacts, outputs, self.version, squeeze)
        return (h[0] if squeeze else h), tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: Tape, upstream: np.ndarray,
                 grads: list[np.ndarray] | None = None) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse pass. Parameter gradients are added into ``grads`` if given."""
        if tape.version != self.version:
            raise RuntimeError("tape is stale: parameters changed after the forward pass")
        g = np.atleast_2d(np.asarray(upstream, dtype=tape.outputs[-1].dtype))
        if g.shape != tape.outputs[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {tape.outputs[-1].shape}")
        if grads is None:
            grads = self.zero_grads()
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "leaky_relu":
                g = g * np.where(tape.preacts[i] >= 0, 1.0, self.slope)
            elif layer.activation == "sigmoid":
                y = tape.outputs[i]
                g = g * y * (1.0 - y)
            grads[2 * i] += g.T @ tape.inputs[i]
            grads[2 * i + 1] += g.sum(axis=0)
            g = g @ layer.weight
        return grads, (g[0] if tape.squeeze else g)

    def bump(self) -> None:
        """Mark parameters as modified; outstanding tapes become stale."""
        self.version += 1


@dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp

    @classmethod
    def init(cls, data_dim: int, latent_dim: int, rng: np.random.Generator,
             hidden: Sequence[int] = (256, 64), dtype=np.float64,
             slope: float = LEAKY_SLOPE) -> "Autoencoder":
        """Encoder D->256->64->L (linear code), decoder L->64->256->D (sigmoid output)."""
        enc_sizes = [data_dim, *hidden, latent_dim]
        dec_sizes = [latent_dim, *reversed(hidden), data_dim]
        n = len(hidden)
        enc = Mlp.init(enc_sizes, ["leaky_relu"] * n + ["linear"], rng, dtype, slope)
        dec = Mlp.init(dec_sizes, ["leaky_relu"] * n + ["sigmoid"], rng, dtype, slope)
        return cls(enc, dec)

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def data_dim(self) -> int:
        return self.encoder.in_dim

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def split(self, flat: list) -> tuple[list, list]:
        k = len(self.encoder.params())
        return flat[:k], flat[k:]

    def bump(self) -> None:
        self.encoder.bump()
        self.decoder.bump()

    def copy(self) -> "Autoencoder":
        return Autoencoder(self.encoder.copy(), self.decoder.copy())

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decoder(self.encoder(x))


def encode(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    return ae.encoder(x)


def decode(ae: Autoencoder, z: np.ndarray) -> np.ndarray:
    return ae.decoder(z)


def backprop(net: Mlp, tape: Tape, upstream: np.ndarray):
    """Return (parameter gradients, input gradient) for one forward tape."""
    return net.backward(tape, upstream)


@dataclass
class Optimizer:
    """Plain SGD or Adam over a fixed list of parameter arrays, updated in place."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(opt: Optimizer, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    opt.step(params, grads)


def grad_check(loss_fn: Callable[[], float], params: list[np.ndarray],
               grads: list[np.ndarray], h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst elementwise relative error between ``grads`` and central differences.

    ``loss_fn`` is re-evaluated after perturbing each entry of ``params`` in
    place. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
