"""Evaluation: reconstruction / transformed MSE, the latent-linear AE
baseline, PCA loading concentration, and the mutual information gap (MIG)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .model import MangoModel, transport
from .transforms import TransformFamily, apply_unchecked


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over rows of the per-pixel mean squared error."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    return float(np.mean((a - b) ** 2))


def image_mse(model: MangoModel, ds: Dataset) -> float:
    x = ds.flat()
    return mse(x, model.decode(model.encode(x)))


def _transformed_stack(fam: TransformFamily, alpha: float, images: np.ndarray) -> np.ndarray:
    return apply_unchecked(fam, alpha, images).reshape(len(images), -1)


def transformed_mse(model: MangoModel, ds: Dataset, m: int, alphas: Sequence[float],
                    steps: int = 1) -> float:
    """Mean of ||h_m(alpha, x) - g(expm(alpha A_m) f(x))||^2 / D over samples and alphas."""
    fam = model.families[m]
    z = model.encode(ds.flat())
    errs = []
    for a in alphas:
        target = _transformed_stack(fam, a, ds.images)
        errs.append(mse(target, model.decode(transport(model, z, m, a, steps))))
    return float(np.mean(errs))


def fit_linear_displacement(model: MangoModel, ds: Dataset, fam: TransformFamily,
                            alphas: np.ndarray) -> np.ndarray:
    """Least-squares Delta with z(h(alpha, x)) - z(x) ~ alpha * Delta; ``alphas[i]`` pairs with image i."""
    alphas = np.asarray(alphas, dtype=np.float64)
    denom = float(alphas @ alphas)
    if denom == 0.0:
        raise ValueError("degenerate fit: all alphas are zero")
    z = model.encode(ds.flat())
    xt = np.stack([apply_unchecked(fam, float(a), im) for a, im in zip(alphas, ds.images)])
    zt = model.encode(xt.reshape(len(ds), -1))
    return alphas @ (zt - z) / denom


def linear_traversal_mse(model: MangoModel, ds: Dataset, fam: TransformFamily, delta: np.ndarray,
                         alphas: Sequence[float], steps: int = 1) -> float:
    z = model.encode(ds.flat())
    errs = []
    for a in alphas:
        zc = z.copy()
        for _ in range(steps):
            zc = zc + (a / steps) * delta
        errs.append(mse(_transformed_stack(fam, a, ds.images), model.decode(zc)))
    return float(np.mean(errs))


def ae_linear_baseline(model: MangoModel, fit_ds: Dataset, fam: TransformFamily,
                       alphas: Sequence[float], eval_ds: Dataset | None = None,
                       seed: int = 0) -> float:
    """Transformed MSE of a plain AE whose latent traversal is z + alpha * Delta.

    Delta is fitted on ``fit_ds`` with alphas drawn uniformly from [-1, 1].
    """
    rng = np.random.default_rng(seed)
    fit_alphas = rng.uniform(-1.0, 1.0, size=len(fit_ds))
    delta = fit_linear_displacement(model, fit_ds, fam, fit_alphas)
    return linear_traversal_mse(model, eval_ds if eval_ds is not None else fit_ds, fam, delta, alphas)


def augmentation_latents(model: MangoModel, images: np.ndarray, fam: TransformFamily,
                         alphas: np.ndarray) -> np.ndarray:
    """Latents of h(alpha_j, img_i); shape (n_refs, n_augs, L)."""
    out = []
    for img in images:
        aug = np.stack([apply_unchecked(fam, float(a), img) for a in alphas])
        out.append(model.encode(aug.reshape(len(alphas), -1)))
    return np.stack(out)


def pca(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Explained-variance ratios and principal axes (rows) of the centered data."""
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s * s
    total = var.sum()
    evr = var / total if total > 0 else np.zeros_like(var)
    return evr, vt


@dataclass
class PcaResult:
    evr: np.ndarray
    loading: np.ndarray  # unit norm, non-negative magnitudes
    concentration: float


def loading_concentration(latents: np.ndarray, block: slice) -> PcaResult:
    """PCA per reference set (first axis), averaged; concentration = first-PC energy in ``block``."""
    if latents.shape[1] < 2:
        raise ValueError("need at least two augmentations per reference")
    evrs, sq = [], []
    for zs in latents:
        evr, vt = pca(zs)
        evrs.append(evr)
        sq.append(vt[0] ** 2)
    sq_mean = np.mean(sq, axis=0)
    return PcaResult(np.mean(evrs, axis=0), np.sqrt(sq_mean), float(sq_mean[block].sum()))


def pca_concentration(model: MangoModel, ds: Dataset, m: int, n_refs: int = 10,
                      n_augs: int = 100, seed: int = 0, block: slice | None = None) -> PcaResult:
    """``block`` defaults to operator m's coordinates; pass one to score a model without operators."""
    if n_augs < 2:
        raise ValueError("n_augs must be >= 2")
    rng = np.random.default_rng(seed)
    refs = rng.choice(len(ds), size=n_refs, replace=False)
    alphas = rng.uniform(-1.0, 1.0, size=n_augs)
    lat = augmentation_latents(model, ds.images[refs], model.families[m], alphas)
    return loading_concentration(lat, model.operator.block_slice(m) if block is None else block)


def _equal_width_bins(v: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(len(v), dtype=np.int64)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _quantile_bins(v: np.ndarray, bins: int) -> np.ndarray:
    # rank-based, so any strictly monotone reparameterization gives the same bins
    ranks = np.argsort(np.argsort(v, kind="stable"), kind="stable")
    return (ranks * bins) // len(v)


def discrete_entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def discrete_mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) from the joint histogram of two label arrays."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    pxy = joint / len(a)
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))


def mig(latents: np.ndarray, factor: np.ndarray, bins: int = 20) -> float:
    """Gap between the two largest I(z_j; factor), normalized by H(factor)."""
    latents = np.asarray(latents, dtype=np.float64)
    factor = np.asarray(factor, dtype=np.float64)
    n, dims = latents.shape
    if n < 10 * bins:
        raise ValueError(f"need at least {10 * bins} samples for {bins} bins, got {n}")
    if dims < 2:
        raise ValueError("need at least two latent coordinates")
    f = _equal_width_bins(factor, bins)
    h = discrete_entropy(f)
    if h == 0.0:
        raise ValueError("factor is constant (zero entropy)")
    mi = sorted((discrete_mutual_info(_quantile_bins(latents[:, j], bins), f)
                 for j in range(dims)), reverse=True)
    return (mi[0] - mi[1]) / h


def mig_for_family(model: MangoModel, ds: Dataset, fam: TransformFamily, n_refs: int = 40,
                   n_augs: int = 100, bins: int = 20, seed: int = 0) -> float:
    """MIG of the transformation parameter alpha over pooled augmentations of random references."""
    rng = np.random.default_rng(seed)
    refs = rng.choice(len(ds), size=n_refs, replace=False)
    alphas = rng.uniform(-1.0, 1.0, size=(n_refs, n_augs))
    lat = [augmentation_latents(model, ds.images[[r]], fam, a)[0] for r, a in zip(refs, alphas)]
    return mig(np.concatenate(lat), alphas.reshape(-1), bins)


@dataclass
class MetricsReport:
    image_mse: float
    transformed_mse: dict[str, float] = field(default_factory=dict)
    baseline_mse: dict[str, float] = field(default_factory=dict)
    pca: dict[str, PcaResult] = field(default_factory=dict)
    mig: dict[str, float] = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("image_mse", "", self.image_mse)]
        for name, v in self.transformed_mse.items():
            out.append(("transformed_mse", name, v))
        for name, v in self.baseline_mse.items():
            out.append(("ae_linear_transformed_mse", name, v))
        for name, p in self.pca.items():
            out.append(("pca_concentration", name, p.concentration))
            out.append(("pca_evr1", name, float(p.evr[0])))
        for name, v in self.mig.items():
            out.append(("mig", name, v))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "family", "value"])
            for metric, fam, v in self.rows():
                w.writerow([metric, fam, repr(float(v))])

    def summary(self) -> str:
        lines = [f"image MSE            {self.image_mse:.5f}"]
        for metric, fam, v in self.rows()[1:]:
            lines.append(f"{metric + ' [' + fam + ']':<40s} {v:.5f}")
        lines.append("(LPIPS not computed: needs a pretrained perceptual network)")
        return "\n".join(lines)


def evaluate(model: MangoModel, ds: Dataset, families: Sequence[str] | None = None,
             alphas: Sequence[float] = (-1.0, -0.5, 0.5, 1.0), n_refs: int = 10,
             n_augs: int = 100, mig_refs: int = 40, seed: int = 0,
             baseline: MangoModel | None = None, fit_ds: Dataset | None = None) -> MetricsReport:
    names = [f.name for f in model.families] if families is None else list(families)
    report = MetricsReport(image_mse(model, ds))
    for name in names:
        m = model.family_index(name)
        fam = model.families[m]
        report.transformed_mse[name] = transformed_mse(model, ds, m, alphas)
        report.pca[name] = pca_concentration(model, ds, m, n_refs, n_augs, seed)
        report.mig[name] = mig_for_family(model, ds, fam, mig_refs, n_augs, seed=seed)
        if baseline is not None:
            report.baseline_mse[name] = ae_linear_baseline(
                baseline, fit_ds if fit_ds is not None else ds, fam, alphas, ds, seed)
    return report
