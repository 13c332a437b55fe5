"""Command-line entry point: ``mango {train,eval,compose,bench}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import checkpoint as ckpt_mod
from .data import Dataset, IdxParseError, SyntheticSpec, load_idx, make_synthetic
from .metrics import evaluate
from .model import MangoModel, TrainConfig, TrainingDiverged, seed_streams, train, transform_latent
from .transforms import KINDS, TransformFamily

log = logging.getLogger("mango")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def parse_ops(text: str) -> list[tuple[str, int]]:
    """``"rotate:2,thicken:2"`` -> [("rotate", 2), ("thicken", 2)]; empty string -> []."""
    ops = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, size = item.partition(":")
        if name not in KINDS:
            raise UsageError(f"unknown transform {name!r}; expected one of {', '.join(KINDS)}")
        try:
            b = int(size) if size else 2
        except ValueError:
            raise UsageError(f"bad block size in {item!r}") from None
        if b < 1:
            raise UsageError(f"block size must be positive in {item!r}")
        ops.append((name, b))
    if len({n for n, _ in ops}) != len(ops):
        raise UsageError("each transform may appear only once in --ops")
    return ops


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _load_data(args) -> Dataset:
    if args.synthetic:
        return make_synthetic(SyntheticSpec(args.synthetic, args.limit or 2000, seed=args.seed))
    if not args.data:
        raise UsageError("one of --data or --synthetic is required")
    path = Path(args.data)
    if not path.is_file():
        raise UsageError(f"data file not found: {path}")
    try:
        ds = load_idx(path)
    except IdxParseError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    start = args.offset
    stop = None if not args.limit else start + args.limit
    if start >= len(ds):
        raise UsageError(f"--offset {start} is past the end of {len(ds)} images")
    return Dataset(ds.images[start:stop], ds.source, args.seed)


def _load_checkpoint(path) -> ckpt_mod.Checkpoint:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return ckpt_mod.load(path)
    except ckpt_mod.CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_train(args) -> int:
    ops = parse_ops(args.ops)
    ds = _load_data(args)
    try:
        cfg = TrainConfig(gamma=args.gamma, lam=args.lam, eta1=args.eta1, eta2=args.eta2,
                          batch_size=args.batch_size, epochs=args.epochs, latent_dim=args.latent,
                          block_sizes=tuple(b for _, b in ops), seed=args.seed,
                          alpha_mode=args.alpha_mode, optimizer=args.optimizer)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    families = [TransformFamily(name) for name, _ in ops]
    init_rng, shuffle_rng, alpha_rng = seed_streams(cfg.seed)
    model = MangoModel.init(ds.dim, families, cfg, init_rng)
    try:
        model, history, _ = train(model, ds, cfg, rngs=(shuffle_rng, alpha_rng))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ckpt = ckpt_mod.Checkpoint(model, cfg, {"shuffle": shuffle_rng.bit_generator.state,
                                            "alpha": alpha_rng.bit_generator.state}, cfg.epochs)
    ckpt_mod.save(args.out, ckpt)
    hist_path = args.history or f"{args.out}.history.csv"
    history.write_csv(hist_path, model.n_ops)
    last = history.rows[-1] if history.rows else {}
    print(f"wrote {args.out} and {hist_path}; final epoch: {last}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model
    names = [f.name for f in model.families]
    if args.families:
        wanted = [s.strip() for s in args.families.split(",") if s.strip()]
        for name in wanted:
            if name not in names:
                raise UsageError(f"family {name!r} not in checkpoint (has: {', '.join(names) or 'none'})")
        names = wanted
    ds = _load_data(args)
    baseline = _load_checkpoint(args.baseline).model if args.baseline else None
    report = evaluate(model, ds, names, alphas=parse_floats(args.alphas), n_refs=args.n_refs,
                      n_augs=args.n_augs, mig_refs=args.mig_refs, seed=args.seed,
                      baseline=baseline)
    report.write_csv(args.out)
    print(report.summary())
    print(f"wrote {args.out}")
    return 0


def _write_pgm(path, img: np.ndarray) -> None:
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def compose_grid(model, image: np.ndarray, ops: list[int], alpha1, alpha2) -> np.ndarray:
    """Decoded traversals; cell (i, j) uses alpha1[i] on ops[0] and alpha2[j] on ops[1]."""
    h, w = image.shape
    z = model.encode(image.reshape(1, -1))
    cols = alpha2 if len(ops) > 1 else [0.0]
    grid = np.zeros((len(alpha1) * h, len(cols) * w))
    for i, a1 in enumerate(alpha1):
        for j, a2 in enumerate(cols):
            coeffs = [(ops[0], a1)] + ([(ops[1], a2)] if len(ops) > 1 else [])
            out = model.decode(transform_latent(model, z, coeffs)).reshape(h, w)
            grid[i * h:(i + 1) * h, j * w:(j + 1) * w] = out
    return grid


def cmd_compose(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model
    names = [s.strip() for s in args.ops.split(",") if s.strip()]
    if not 1 <= len(names) <= 2:
        raise UsageError("--ops takes one or two operator names")
    try:
        ops = [model.family_index(n) for n in names]
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    if len(set(ops)) != len(ops):
        raise UsageError("--ops names must be distinct")
    ds = _load_data(args)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} images")
    a1, a2 = parse_floats(args.alpha1), parse_floats(args.alpha2)
    grid = compose_grid(model, ds.images[args.index], ops, a1, a2)
    if args.png:
        from PIL import Image
        Image.fromarray(np.rint(np.clip(grid, 0, 1) * 255).astype(np.uint8)).save(args.out)
    else:
        _write_pgm(args.out, grid)
    h, w = ds.shape
    index_path = args.index_file or f"{args.out}.txt"
    with open(index_path, "w") as fh:
        fh.write(f"# rows: {names[0]} alpha; cols: {names[1] if len(names) > 1 else '-'} alpha; "
                 f"cell {h}x{w} pixels\n")
        fh.write("row col y x alpha1 alpha2\n")
        for i, v1 in enumerate(a1):
            for j, v2 in enumerate(a2 if len(names) > 1 else [0.0]):
                fh.write(f"{i} {j} {i * h} {j * w} {v1!r} {v2!r}\n")
    print(f"wrote {args.out} and {index_path}")
    return 0


def cmd_bench(args) -> int:
    ls = [int(v) for v in parse_floats(args.ls)]
    ms = [int(v) for v in parse_floats(args.ms)]
    if any(2 * m > args.fixed_l for m in ms) or any(2 * args.fixed_m > l for l in ls):
        raise UsageError("every sweep point needs 2*M <= L for the block-diagonal model")
    rows = bench_mod.run_bench(ls, ms, args.batch_size, args.reps, args.seed, args.inner_iters,
                               args.fixed_m, args.fixed_l,
                               progress=lambda r: print(f"{r.method:6s} L={r.latent_dim:<4d} "
                                                        f"M={r.n_ops:<2d} {r.median_seconds:.4f} s"))
    bench_mod.write_csv(args.out, rows)
    print(f"wrote {args.out}")
    return 0


def _add_data_flags(p: argparse.ArgumentParser, limit: int | None) -> None:
    p.add_argument("--data", help="IDX3 image file (optionally gzip-compressed)")
    p.add_argument("--synthetic", choices=["rotating-bar", "rotating-blob"],
                   help="generate a synthetic dataset instead of reading --data")
    p.add_argument("--offset", type=int, default=0, help="first image used from --data")
    p.add_argument("--limit", type=int, default=limit, help="number of images (0 = all)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mango", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train operators and autoencoder jointly")
    _add_data_flags(p, 2000)
    p.add_argument("--ops", default="rotate:2,thicken:2",
                   help="name:block_size list bound to blocks in order; empty for a plain AE")
    p.add_argument("--latent", type=int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1e-4)
    p.add_argument("--eta1", type=float, default=1e-3)
    p.add_argument("--eta2", type=float, default=1e-3)
    p.add_argument("--alpha-mode", choices=["per-batch", "per-sample"], default="per-batch")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--out", default="mango.ckpt")
    p.add_argument("--history", help="loss-history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute reconstruction, transport and disentanglement metrics")
    _add_data_flags(p, 500)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="plain-AE checkpoint for the latent-linear baseline")
    p.add_argument("--families", help="comma-separated subset of operator names")
    p.add_argument("--alphas", default="-1,-0.5,0.5,1")
    p.add_argument("--n-refs", type=int, default=10)
    p.add_argument("--n-augs", type=int, default=100)
    p.add_argument("--mig-refs", type=int, default=40)
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compose", help="render a grid of composed latent traversals")
    _add_data_flags(p, None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="image index within the loaded data")
    p.add_argument("--ops", default="rotate,thicken", help="one or two operator names")
    p.add_argument("--alpha1", default="-2,-1,-0.5,0,0.5,1,2")
    p.add_argument("--alpha2", default="-2,-1,-0.5,0,0.5,1,2")
    p.add_argument("--out", default="compose.pgm")
    p.add_argument("--index-file", help="cell index text file (default: <out>.txt)")
    p.add_argument("--png", action="store_true", help="write PNG via Pillow instead of PGM")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("bench", help="per-batch runtime sweep over L and M")
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--inner-iters", type=int, default=50, help="ISTA iterations per pair (baseline)")
    p.add_argument("--ls", default="16,32,64,128")
    p.add_argument("--ms", default="2,4,6,8")
    p.add_argument("--fixed-m", type=int, default=8)
    p.add_argument("--fixed-l", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MANGO_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        parser.error(f"MANGO_THREADS must be an integer, got {threads!r}")
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        print(f"mango {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
