"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible without
``-s``) and then asserts.  The MNIST tests need
``data/mnist5k-images-idx3-ubyte.gz`` (see ``scripts/make_mnist_subset.py``).

Run just this file with ``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest

from mango import checkpoint as ck
from mango.bench import run_bench
from mango.data import Dataset, SyntheticSpec, bar_raster, encode_idx, load_idx, make_synthetic, parse_idx
from mango.linalg import expm, expm_frechet
from mango.metrics import (
    _equal_width_bins,
    _quantile_bins,
    ae_linear_baseline,
    image_mse,
    mig,
    mig_for_family,
    pca_concentration,
    transformed_mse,
)
from mango.model import (
    MangoModel,
    TrainConfig,
    init_model,
    seed_streams,
    total_loss,
    train,
    train_autoencoder,
    transform_latent,
    transport,
    transport_loss,
)
from mango.transforms import family
from oracles import central_diff, entropy, histogram_mi, rel_err, taylor_expm

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist5k-images-idx3-ubyte.gz"
IN_RANGE = (-1.0, -0.5, 0.5, 1.0)

# rotating bar: single operator on a 2-block inside an 8-dim latent
BAR = dict(epochs=40, lam=1.0, eta1=1e-2, alpha_mode="per-sample", init_scale=0.5)
# desk-scale digits: 2000 training images, rotate:2 + thicken:2 in a 16-dim latent
DIGITS = dict(epochs=150, lam=30.0, alpha_mode="per-sample")
DIGITS_AE_EPOCHS = 100
# ISTA iterations per pair in the timing sweep (the CLI default is 50)
BENCH_INNER_ITERS = 3


def report(n: int, ok: bool, detail: str, capsys) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def _set(p, v, f):
    old = p.copy()
    p[...] = v
    try:
        return f()
    finally:
        p[...] = old


def _tiny(seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(latent_dim=4, block_sizes=(2, 2), hidden=(5, 5), seed=seed)
    model = MangoModel.init(6, [family("rotate"), family("thicken")], cfg, rng)
    for p in model.ae.params():
        p[...] += 0.3 * rng.standard_normal(p.shape)
    for b in model.operator.blocks:
        b[...] = 0.5 * rng.standard_normal(b.shape)
    return model, rng


# 1 ----------------------------------------------------------------------------

def test_gradients_match_finite_differences(capsys):
    t0 = time.perf_counter()
    worst = {"frechet": 0.0, "transport": 0.0, "theta": 0.0, "operator": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        mat, e = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        h = 1e-6
        num = (expm(mat + h * e) - expm(mat - h * e)) / (2 * h)
        worst["frechet"] = max(worst["frechet"], rel_err(expm_frechet(mat, e)[1], num))

        model, rng = _tiny(seed)
        m = seed % 2
        z, zt = rng.standard_normal(4), rng.standard_normal(4)
        _, ga, gz, gzt = transport_loss(model, m, z, zt, 0.7, 0.05)
        blk = model.operator.blocks[m]
        tl = lambda: transport_loss(model, m, z, zt, 0.7, 0.05)[0]
        for g, n in ((ga, central_diff(lambda v: _set(blk, v, tl), blk.copy(), 1e-6)),
                     (gz, central_diff(lambda v: transport_loss(model, m, v, zt, 0.7, 0.05)[0], z, 1e-6)),
                     (gzt, central_diff(lambda v: transport_loss(model, m, z, v, 0.7, 0.05)[0], zt, 1e-6))):
            worst["transport"] = max(worst["transport"], rel_err(g, n))

        x, xt = rng.uniform(size=(2, 6)), rng.uniform(size=(2, 6))
        _, g_theta, g_a = total_loss(model, x, xt, m, 0.6, 0.8, 0.01)
        f = lambda: total_loss(model, x, xt, m, 0.6, 0.8, 0.01)[0]
        for p, g in zip(model.ae.params(), g_theta):
            num = central_diff(lambda v: _set(p, v, f), p.copy(), 1e-5)
            worst["theta"] = max(worst["theta"], rel_err(g, num, floor=1e-4))
        num = central_diff(lambda v: _set(blk, v, f), blk.copy(), 1e-5)
        worst["operator"] = max(worst["operator"], rel_err(g_a, num))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"20 instances, worst relative error: {detail}; {elapsed:.1f} s", capsys)


# 2 ----------------------------------------------------------------------------

def test_expm_against_taylor_and_group_law(capsys):
    rng = np.random.default_rng(2)
    worst_taylor = 0.0
    for _ in range(30):
        n = int(rng.integers(1, 7))
        mat = rng.standard_normal((n, n))
        mat *= rng.uniform(0.01, 10.0) / np.linalg.norm(mat)
        ref = taylor_expm(mat)
        worst_taylor = max(worst_taylor, np.linalg.norm(expm(mat) - ref) / np.linalg.norm(ref))
    worst_group = 0.0
    for _ in range(30):
        a_mat = rng.standard_normal((4, 4))
        a, b = rng.uniform(-2, 2, size=2)
        lhs, rhs = expm(a * a_mat) @ expm(b * a_mat), expm((a + b) * a_mat)
        worst_group = max(worst_group, np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(rhs))))
    ok = worst_taylor <= 1e-10 and worst_group <= 1e-9
    report(2, ok, f"Taylor rel {worst_taylor:.1e}, group law {worst_group:.1e}", capsys)


# 3 ----------------------------------------------------------------------------

def test_structural_disentanglement(capsys):
    ds = make_synthetic(SyntheticSpec("rotating-blob", 256, seed=3))
    cfg = TrainConfig(epochs=5, batch_size=32, latent_dim=10, block_sizes=(2, 3, 2),
                      hidden=(64,), seed=3, eta1=1e-2)
    fams = [family("rotate"), family("thicken"), family("blur")]
    model = init_model(ds.dim, fams, cfg)
    checks = []

    def check(model, epoch, batch):
        g = model.operator.pairwise_inner()
        checks.append(bool(np.all(g[~np.eye(len(g), dtype=bool)] == 0.0)))

    train(model, ds, cfg, callbacks=[check])
    z = model.encode(ds.flat()[:20])
    coeffs = [(0, 0.7), (1, -0.4), (2, 1.1)]
    ref = transform_latent(model, z, coeffs)
    drift = 0.0
    for order in ([1, 2, 0], [2, 0, 1], [2, 1, 0], [0, 2, 1], [1, 0, 2]):
        drift = max(drift, np.max(np.abs(transform_latent(model, z, [coeffs[i] for i in order]) - ref)))
    expected_steps = 5 * math.ceil(256 / 32)
    ok = len(checks) == expected_steps and all(checks) and drift <= 1e-9
    report(3, ok, f"{sum(checks)}/{expected_steps} steps trace-orthogonal, "
                  f"permutation drift {drift:.1e}", capsys)


# 4 ----------------------------------------------------------------------------

def test_rotating_bar_generator_recovery(capsys):
    ds = make_synthetic(SyntheticSpec("rotating-bar", 2000, seed=0))
    cfg = TrainConfig(latent_dim=8, block_sizes=(2,), seed=0, **BAR)
    model = init_model(ds.dim, [family("rotate")], cfg)
    t0 = time.perf_counter()
    train(model, ds, cfg)
    elapsed = time.perf_counter() - t0
    blk = model.operator.blocks[0]
    ratio = np.linalg.norm((blk + blk.T) / 2) / np.linalg.norm((blk - blk.T) / 2)

    ev = ds.subset(300)
    z = model.encode(ev.flat())
    step = family("rotate").theta_max

    def analytic_mse(alphas):
        errs = []
        for a in alphas:
            target = np.stack([bar_raster(t + math.radians(step * a)) for t in ev.factors["angle"]])
            errs.append(np.mean((model.decode(transport(model, z, 0, a)) - target.reshape(len(z), -1)) ** 2))
        return float(np.mean(errs))

    inside, outside = analytic_mse(IN_RANGE), analytic_mse((-2.0, -1.5, 1.5, 2.0))
    ok = ratio <= 0.1 and outside <= 2 * inside and elapsed <= 600
    report(4, ok, f"sym/antisym {ratio:.3f} (<= 0.1), out/in-range MSE {outside:.4f}/{inside:.4f} "
                  f"= {outside / inside:.2f} (<= 2), train {elapsed:.0f} s", capsys)


# 5 and 7 share the trained digit models --------------------------------------

@pytest.fixture(scope="module")
def digits():
    if not MNIST.exists():
        pytest.skip("digit subset missing; run scripts/make_mnist_subset.py")
    all_digits = load_idx(MNIST)
    # train on the first 2000, evaluate on 500 digits never seen in training
    train_ds, fit_ds = all_digits.subset(2000), all_digits.subset(1000)
    ev = Dataset(all_digits.images[4000:4500])
    fams = [family("rotate"), family("thicken")]
    t0 = time.perf_counter()
    cfg = TrainConfig(latent_dim=16, block_sizes=(2, 2), seed=7, **DIGITS)
    mango = init_model(train_ds.dim, fams, cfg)
    train(mango, train_ds, cfg)
    ae_cfg = TrainConfig(latent_dim=16, block_sizes=(2, 2), seed=7, lam=0.0, epochs=DIGITS_AE_EPOCHS)
    ae = init_model(train_ds.dim, fams, ae_cfg)
    train_autoencoder(ae.ae, train_ds, ae_cfg)
    return dict(mango=mango, ae=ae, fit=fit_ds, ev=ev, fams=fams, seconds=time.perf_counter() - t0)


def test_digit_transport_beats_linear_latent_traversal(digits, capsys):
    mango, ae, ev = digits["mango"], digits["ae"], digits["ev"]
    t_mango = transformed_mse(mango, ev, 0, IN_RANGE)
    t_lin = ae_linear_baseline(ae, digits["fit"], digits["fams"][0], IN_RANGE, ev)
    img_mango, img_ae = image_mse(mango, ev), image_mse(ae, ev)
    ok = t_mango <= 0.5 * t_lin and img_mango <= 2 * img_ae and digits["seconds"] <= 1800
    report(5, ok, f"rotate transformed MSE {t_mango:.4f} vs linear {t_lin:.4f} "
                  f"(ratio {t_mango / t_lin:.2f}, need <= 0.5); image MSE {img_mango:.4f} vs "
                  f"{img_ae:.4f} (ratio {img_mango / img_ae:.2f}, need <= 2); "
                  f"train {digits['seconds']:.0f} s", capsys)


def test_digit_disentanglement_metrics(digits, capsys):
    mango, ae, ev = digits["mango"], digits["ae"], digits["ev"]
    parts, ok = [], True
    for m, fam in enumerate(digits["fams"]):
        c_m = pca_concentration(mango, ev, m).concentration
        c_a = pca_concentration(ae, ev, m).concentration
        g_m, g_a = mig_for_family(mango, ev, fam), mig_for_family(ae, ev, fam)
        ok &= c_m > c_a and g_m > g_a
        parts.append(f"{fam.name}: concentration {c_m:.3f} vs {c_a:.3f}, MIG {g_m:.4f} vs {g_a:.4f}")
    report(7, ok, "; ".join(parts), capsys)


# 6 ----------------------------------------------------------------------------

def test_runtime_scaling(capsys):
    t0 = time.perf_counter()
    rows = run_bench(reps=5, mango_reps=25, max_iters=BENCH_INNER_ITERS)
    elapsed = time.perf_counter() - t0
    t = {(r.method, r.latent_dim, r.n_ops): r.median_seconds for r in rows}
    mango = [v for (meth, _, _), v in t.items() if meth == "mango"]
    mae_l = [t["mae", l, 8] for l in (16, 32, 64, 128)]
    mae_m = [t["mae", 32, m] for m in (2, 4, 6, 8)]
    r16, r128 = t["mae", 16, 8] / t["mango", 16, 8], t["mae", 128, 8] / t["mango", 128, 8]
    spread = max(mango) / min(mango)
    ok = (spread <= 2 and all(np.diff(mae_l) > 0) and all(np.diff(mae_m) > 0)
          and r128 >= 5 * r16 and elapsed < 600)
    report(6, ok, f"MANGO max/min {spread:.2f} (<= 2); MAE over L "
                  f"{[round(v, 3) for v in mae_l]}, over M {[round(v, 3) for v in mae_m]}; "
                  f"ratio L=16 {r16:.1f}, L=128 {r128:.1f} ({r128 / r16:.1f}x, need >= 5); "
                  f"{elapsed:.0f} s", capsys)


# 8 ----------------------------------------------------------------------------

def test_mig_estimator(capsys):
    rng = np.random.default_rng(8)
    n, bins = 800, 20
    factor = rng.uniform(-1, 1, size=n)
    lat = np.stack([factor + 0.1 * rng.standard_normal(n), np.cos(2 * factor) + 0.2 * rng.standard_normal(n),
                    rng.standard_normal(n)], axis=1)
    f = _equal_width_bins(factor, bins).tolist()
    mis = sorted((histogram_mi(_quantile_bins(lat[:, j], bins).tolist(), f) for j in range(3)),
                 reverse=True)
    err = abs(mig(lat, factor, bins) - (mis[0] - mis[1]) / entropy(f))
    perfect_f = rng.uniform(-1, 1, 4000)
    perfect = mig(np.column_stack([perfect_f, rng.standard_normal((4000, 5))]), perfect_f)
    indep = mig(rng.standard_normal((4000, 6)), rng.uniform(size=4000))
    ok = err <= 1e-12 and perfect >= 0.8 and indep <= 0.05
    report(8, ok, f"oracle error {err:.1e}, perfect {perfect:.3f} (>= 0.8), "
                  f"independent {indep:.3f} (<= 0.05)", capsys)


# 9 ----------------------------------------------------------------------------

def test_plumbing(tmp_path, capsys):
    ds = make_synthetic(SyntheticSpec(count=40, height=10, width=10, seed=9))
    cfg = TrainConfig(epochs=2, batch_size=16, latent_dim=6, block_sizes=(2, 2), hidden=(12,), seed=9)
    fams = [family("rotate"), family("thicken")]

    def run():
        model = init_model(ds.dim, fams, cfg)
        _, shuffle, alpha = seed_streams(cfg.seed)
        _, hist, _ = train(model, ds, cfg, rngs=(shuffle, alpha))
        return model, hist, shuffle

    a, ha, shuffle = run()
    b, hb, _ = run()
    same_run = ha.rows == hb.rows and all(
        np.array_equal(p, q) for p, q in zip(a.ae.params() + a.operator.blocks, b.ae.params() + b.operator.blocks))

    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save(p1, ck.Checkpoint(a, cfg, {"shuffle": shuffle.bit_generator.state}, 2))
    ck.save(p2, ck.load(p1))
    same_ckpt = p1.read_bytes() == p2.read_bytes()

    # two 2x3 images, byte for byte
    fixture = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 1, 2, 3, 4, 5,
                     255, 254, 253, 128, 127, 0])
    px = parse_idx(fixture)
    idx_ok = px.shape == (2, 2, 3) and px[1, 0, 0] == 255 and encode_idx(px) == fixture
    ok = same_run and same_ckpt and idx_ok
    report(9, ok, f"bit-identical runs {same_run}, checkpoint byte identity {same_ckpt}, "
                  f"IDX fixture round trip {idx_ok}", capsys)
