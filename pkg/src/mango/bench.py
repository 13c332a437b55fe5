"""Per-batch training-time comparison: block-diagonal operators vs a dense
dictionary with l1 coefficient inference.

Both methods consume the same pre-generated batch of (x, x~) pairs, so the
timings cover the training step only (encode, transport terms, backprop,
updates), not image augmentation.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SyntheticSpec, make_synthetic
from .mae import DenseOperatorDict, MaeConfig, MaeStepper
from .model import MangoModel, PairGroup, TrainConfig, Trainer
from .nn import Autoencoder
from .transforms import KINDS, TransformFamily, apply_each

L_SWEEP = (16, 32, 64, 128)
M_SWEEP = (2, 4, 6, 8)


@dataclass
class BenchRow:
    method: str
    latent_dim: int
    n_ops: int
    batch_size: int
    median_seconds: float

    def as_csv(self) -> list:
        return [self.method, self.latent_dim, self.n_ops, self.batch_size, repr(self.median_seconds)]


def make_pairs(batch_size: int, n_ops: int, seed: int):
    """A batch of rotating-blob images, their transformed copies, operator labels and alphas."""
    ds = make_synthetic(SyntheticSpec("rotating-blob", batch_size, seed=seed))
    rng = np.random.default_rng(seed)
    labels = np.arange(batch_size) % n_ops
    alphas = rng.uniform(-1.0, 1.0, size=batch_size)
    xt = np.empty_like(ds.images)
    for m in range(n_ops):
        rows = labels == m
        xt[rows] = apply_each(TransformFamily(KINDS[m % len(KINDS)]), alphas[rows], ds.images[rows])
    return ds.flat(), xt.reshape(batch_size, -1), labels, alphas


def median_time(fn, reps: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def time_mango(latent_dim: int, n_ops: int, batch_size: int = 64, reps: int = 5,
               seed: int = 0, block_size: int = 2) -> float:
    x, xt, labels, alphas = make_pairs(batch_size, n_ops, seed)
    cfg = TrainConfig(latent_dim=latent_dim, block_sizes=(block_size,) * n_ops, seed=seed,
                      batch_size=batch_size)
    fams = [TransformFamily(KINDS[m % len(KINDS)]) for m in range(n_ops)]
    model = MangoModel.init(x.shape[1], fams, cfg, np.random.default_rng(seed))
    trainer = Trainer(model, cfg)
    groups = []
    for m in range(n_ops):
        rows = np.flatnonzero(labels == m)
        groups.append(PairGroup(m, rows, xt[rows], alphas[rows]))
    weight = np.ones(batch_size)
    return median_time(lambda: trainer.step(x, groups, weight), reps)


def time_mae(latent_dim: int, n_ops: int, batch_size: int = 64, reps: int = 5, seed: int = 0,
             max_iters: int = 50) -> float:
    x, xt, _, _ = make_pairs(batch_size, n_ops, seed)
    rng = np.random.default_rng(seed)
    ae = Autoencoder.init(x.shape[1], latent_dim, rng)
    d = DenseOperatorDict.random(n_ops, latent_dim, rng)
    stepper = MaeStepper(d, ae, MaeConfig(max_iters=max_iters))
    return median_time(lambda: stepper.step(x, xt), reps)


def sweep_points(ls=L_SWEEP, ms=M_SWEEP, fixed_m: int = 8, fixed_l: int = 32):
    return [(l, fixed_m) for l in ls] + [(fixed_l, m) for m in ms]


def run_bench(ls=L_SWEEP, ms=M_SWEEP, batch_size: int = 64, reps: int = 5, seed: int = 0,
              max_iters: int = 50, fixed_m: int = 8, fixed_l: int = 32,
              progress=None, mango_reps: int | None = None) -> list[BenchRow]:
    """Time both methods at every sweep point, single-threaded.

    ``mango_reps`` (default ``reps``) lets the cheap method take a longer median.
    """
    rows = []
    with threadpool_limits(limits=1):
        for l, m in sweep_points(ls, ms, fixed_m, fixed_l):
            for method in ("mango", "mae"):
                if method == "mango":
                    t = time_mango(l, m, batch_size, mango_reps or reps, seed)
                else:
                    t = time_mae(l, m, batch_size, reps, seed, max_iters)
                rows.append(BenchRow(method, l, m, batch_size, t))
                if progress is not None:
                    progress(rows[-1])
    return rows


def write_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "L", "M", "batch_size", "median_seconds_per_batch"])
        for r in rows:
            w.writerow(r.as_csv())
