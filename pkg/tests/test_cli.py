import csv

import numpy as np
import pytest

from mango import checkpoint as ck
from mango.cli import UsageError, compose_grid, main, parse_ops
from mango.data import write_idx, SyntheticSpec, make_synthetic
from mango.model import transform_latent

TRAIN = ["--synthetic", "rotating-bar", "--limit", "48", "--latent", "6", "--epochs", "2",
         "--batch-size", "16", "--seed", "7"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    imgs = make_synthetic(SyntheticSpec(count=40, seed=1)).images
    write_idx(d / "bars.idx", imgs)
    assert main(["train", "--data", str(d / "bars.idx"), "--ops", "rotate:2,thicken:2",
                 "--latent", "6", "--epochs", "2", "--batch-size", "16", "--seed", "7",
                 "--out", str(d / "m.ckpt")]) == 0
    assert main(["train", "--data", str(d / "bars.idx"), "--ops", "rotate:2,thicken:2",
                 "--lam", "0", "--latent", "6", "--epochs", "60", "--batch-size", "16",
                 "--seed", "7", "--out", str(d / "ae.ckpt")]) == 0
    return d


def test_parse_ops():
    assert parse_ops("rotate:2,thicken:3") == [("rotate", 2), ("thicken", 3)]
    assert parse_ops("") == []
    for bad in ("spin:2", "rotate:x", "rotate:0", "rotate:2,rotate:2"):
        with pytest.raises(UsageError):
            parse_ops(bad)


def test_train_writes_checkpoint_and_history(workdir):
    ckpt = ck.load(workdir / "m.ckpt")
    assert ckpt.model.n_ops == 2 and ckpt.epoch == 2
    with open(workdir / "m.ckpt.history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "recon_loss", "transport_loss_1", "transport_loss_2"]
    assert len(rows) == 2


def test_train_is_deterministic(workdir, tmp_path):
    args = ["train", "--data", str(workdir / "bars.idx"), "--ops", "rotate:2,thicken:2",
            "--latent", "6", "--epochs", "2", "--batch-size", "16", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "again.ckpt")]) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()


def test_plain_autoencoder(tmp_path):
    assert main(["train", *TRAIN, "--ops", "", "--out", str(tmp_path / "plain.ckpt")]) == 0
    assert ck.load(tmp_path / "plain.ckpt").model.n_ops == 0


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.idx"), "--out", str(tmp_path / "x")]) == 2
    assert main(["train", *TRAIN, "--ops", "spin:2"]) == 2
    assert main(["train", *TRAIN[:-2], "--ops", "rotate:4,thicken:4", "--latent", "6"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), *TRAIN[:4]]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "many"])
    assert exc.value.code == 2


def test_divergence_exit_3(tmp_path, capsys):
    assert main(["train", *TRAIN, "--ops", "rotate:2", "--lam", "1e308",
                 "--out", str(tmp_path / "d.ckpt")]) == 3
    assert "diverged" in capsys.readouterr().err


def test_eval(workdir, tmp_path):
    out = tmp_path / "metrics.csv"
    args = ["eval", "--checkpoint", str(workdir / "ae.ckpt"), "--data", str(workdir / "bars.idx"),
            "--n-refs", "3", "--n-augs", "20", "--mig-refs", "10", "--out", str(out)]
    assert main(args) == 0
    with open(out) as fh:
        rows = {(r["metric"], r["family"]): float(r["value"]) for r in csv.DictReader(fh)}
    # no transport training: moving the latent cannot beat plain reconstruction
    for fam in ("rotate", "thicken"):
        assert rows[("transformed_mse", fam)] >= rows[("image_mse", "")]
    again = tmp_path / "again.csv"
    assert main(args[:-1] + [str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_eval_unknown_family(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "bars.idx"),
                 "--families", "blur", "--out", str(tmp_path / "m.csv")]) == 2


def test_eval_with_baseline(workdir, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--baseline", str(workdir / "ae.ckpt"),
                 "--data", str(workdir / "bars.idx"), "--families", "rotate", "--n-refs", "3",
                 "--n-augs", "20", "--mig-refs", "10", "--out", str(out)]) == 0
    assert "ae_linear_transformed_mse,rotate" in out.read_text()


def _read_pgm(path):
    raw = path.read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P5" and maxval == b"255"
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def test_compose(workdir, tmp_path):
    out = tmp_path / "grid.pgm"
    assert main(["compose", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "bars.idx"),
                 "--index", "3", "--alpha1=-2,0,2", "--alpha2", "0,1.5", "--out", str(out)]) == 0
    grid = _read_pgm(out)
    assert grid.shape == (3 * 28, 2 * 28)
    lines = (tmp_path / "grid.pgm.txt").read_text().splitlines()
    assert len(lines) == 2 + 6

    model = ck.load(workdir / "m.ckpt").model
    img = make_synthetic(SyntheticSpec(count=40, seed=1)).images[3]
    img = np.rint(img * 255) / 255  # the IDX file stores bytes
    cells = compose_grid(model, img, [0, 1], [0.0, 0.7], [0.0])
    z = model.encode(img.reshape(1, -1))
    np.testing.assert_allclose(cells[:28], model.decode(z).reshape(28, 28), atol=1e-12)
    single = model.decode(transform_latent(model, z, [(0, 0.7)])).reshape(28, 28)
    np.testing.assert_allclose(cells[28:], single, atol=1e-12)


def test_compose_errors(workdir, tmp_path):
    base = ["compose", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "bars.idx"),
            "--out", str(tmp_path / "g.pgm")]
    assert main(base + ["--ops", "blur"]) == 2
    assert main(base + ["--index", "999"]) == 2


def test_compose_png(workdir, tmp_path):
    pytest.importorskip("PIL")
    from PIL import Image
    out = tmp_path / "g.png"
    assert main(["compose", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "bars.idx"),
                 "--alpha1", "0,1", "--alpha2", "0", "--png", "--out", str(out)]) == 0
    assert Image.open(out).size == (28, 56)


def test_bench_schema(tmp_path, monkeypatch):
    monkeypatch.setenv("MANGO_THREADS", "1")
    out = tmp_path / "bench.csv"
    assert main(["bench", "--ls", "4,8", "--ms", "1,2", "--fixed-m", "2", "--fixed-l", "4",
                 "--reps", "1", "--batch-size", "4", "--inner-iters", "1", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "L", "M", "batch_size", "median_seconds_per_batch"]
    assert len(rows) == 1 + 2 * 4
    assert {r[0] for r in rows[1:]} == {"mango", "mae"}
    assert all(float(r[4]) > 0 for r in rows[1:])


def test_bench_rejects_impossible_layout(tmp_path):
    assert main(["bench", "--ls", "4", "--fixed-m", "8", "--out", str(tmp_path / "b.csv")]) == 2


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("MANGO_THREADS", "lots")
    with pytest.raises(SystemExit) as exc:
        main(["bench"])
    assert exc.value.code == 2
