import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mango.data import Dataset, SyntheticSpec, make_synthetic
from mango.metrics import (
    MetricsReport,
    _equal_width_bins,
    _quantile_bins,
    evaluate,
    fit_linear_displacement,
    image_mse,
    loading_concentration,
    mig,
    mse,
    pca,
    pca_concentration,
    transformed_mse,
)
from mango.model import TrainConfig, init_model
from mango.transforms import family
from oracles import entropy, histogram_mi


def test_mse_basics():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(5, 7)), rng.uniform(size=(5, 7))
    assert mse(a, a) == 0.0
    assert mse(a, b) > 0
    perm = rng.permutation(5)
    assert mse(a[perm], b[perm]) == pytest.approx(mse(a, b), rel=1e-15)
    assert mse(a, b) == pytest.approx(np.mean((a - b) ** 2), rel=1e-15)


def test_mig_matches_brute_force_histogram():
    rng = np.random.default_rng(1)
    n, bins = 600, 20
    factor = rng.uniform(-1, 1, size=n)
    lat = np.stack([factor + 0.1 * rng.standard_normal(n),
                    np.sin(3 * factor) + 0.3 * rng.standard_normal(n),
                    rng.standard_normal(n)], axis=1)
    f = _equal_width_bins(factor, bins).tolist()
    mis = sorted((histogram_mi(_quantile_bins(lat[:, j], bins).tolist(), f) for j in range(3)),
                 reverse=True)
    expected = (mis[0] - mis[1]) / entropy(f)
    assert abs(mig(lat, factor, bins) - expected) <= 1e-12


def test_mig_perfect_coordinate():
    rng = np.random.default_rng(2)
    factor = rng.uniform(-1, 1, size=4000)
    lat = np.column_stack([factor, rng.standard_normal((4000, 5))])
    assert mig(lat, factor, 20) >= 0.8


def test_mig_independent():
    rng = np.random.default_rng(3)
    assert mig(rng.standard_normal((4000, 6)), rng.uniform(size=4000), 20) <= 0.05


def test_mig_tied_top_two():
    rng = np.random.default_rng(4)
    factor = rng.uniform(size=2000)
    lat = np.column_stack([factor, factor, rng.standard_normal(2000)])
    assert mig(lat, factor, 20) == pytest.approx(0.0, abs=1e-12)


def test_mig_invariant_under_cubic_warp():
    rng = np.random.default_rng(5)
    factor = rng.uniform(-1, 1, size=1000)
    lat = np.column_stack([factor + 0.2 * rng.standard_normal(1000), rng.standard_normal((1000, 3))])
    warped = lat ** 3 + 2 * lat
    assert mig(warped, factor) == mig(lat, factor)


def test_mig_errors():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        mig(rng.standard_normal((100, 3)), rng.uniform(size=100), 20)
    with pytest.raises(ValueError):
        mig(rng.standard_normal((400, 3)), np.ones(400), 20)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mig_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    factor = rng.uniform(size=300)
    lat = np.column_stack([factor * rng.uniform(-1, 1), rng.standard_normal((300, 2))])
    assert 0.0 <= mig(lat, factor, 10) <= 1.0


def test_concentration_all_in_block():
    rng = np.random.default_rng(7)
    lat = np.zeros((4, 50, 8))
    lat[..., 2:4] = rng.standard_normal((4, 50, 2))
    res = loading_concentration(lat, slice(2, 4))
    assert res.concentration == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(res.loading) == pytest.approx(1.0, abs=1e-12)


def test_concentration_isotropic():
    rng = np.random.default_rng(8)
    res = loading_concentration(rng.standard_normal((200, 100, 16)), slice(0, 2))
    assert abs(res.concentration - 2 / 16) <= 0.1


def test_pca_properties():
    rng = np.random.default_rng(9)
    evr, vt = pca(rng.standard_normal((60, 5)) @ rng.standard_normal((5, 5)))
    assert evr.sum() <= 1 + 1e-9
    assert np.all(np.diff(evr) <= 1e-15)
    np.testing.assert_allclose(np.linalg.norm(vt, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        loading_concentration(np.zeros((2, 1, 3)), slice(0, 1))


@pytest.fixture(scope="module")
def tiny_model():
    ds = make_synthetic(SyntheticSpec(count=60, height=10, width=10, seed=0))
    cfg = TrainConfig(latent_dim=6, block_sizes=(2, 2), hidden=(12,), seed=1)
    return init_model(ds.dim, [family("rotate"), family("thicken")], cfg), ds


def test_transformed_mse_at_identity_equals_reconstruction(tiny_model):
    model, ds = tiny_model
    assert transformed_mse(model, ds, 0, [0.0]) == pytest.approx(image_mse(model, ds), rel=1e-14)


def test_linear_fit_recovers_exact_displacement(tiny_model, monkeypatch):
    _, ds = tiny_model
    delta = np.array([0.5, -1.0, 0.25, 0.0, 2.0, 1.0])

    class Probe:
        # latent = first six pixels + (last pixel) * delta
        def encode(self, x):
            x = np.asarray(x)
            return x[:, :6] + np.outer(x[:, -1], delta)

    def mark(fam, a, im):
        out = im.copy()
        out[-1, -1] = a
        return out

    monkeypatch.setattr("mango.metrics.apply_unchecked", mark)
    imgs = ds.images.copy()
    imgs[:, -1, -1] = 0.0
    alphas = np.random.default_rng(0).uniform(-1, 1, len(ds))
    fitted = fit_linear_displacement(Probe(), Dataset(imgs), family("rotate"), alphas)
    np.testing.assert_allclose(fitted, delta, atol=1e-8)


def test_linear_fit_degenerate(tiny_model):
    model, ds = tiny_model
    with pytest.raises(ValueError):
        fit_linear_displacement(model, ds, family("rotate"), np.zeros(len(ds)))


def test_pca_concentration_bounds(tiny_model):
    model, ds = tiny_model
    res = pca_concentration(model, ds, 0, n_refs=3, n_augs=20)
    assert 0.0 <= res.concentration <= 1.0
    assert res.evr.sum() <= 1 + 1e-9
    with pytest.raises(ValueError):
        pca_concentration(model, ds, 0, n_augs=1)


def test_report_csv_and_summary(tiny_model, tmp_path):
    model, ds = tiny_model
    rep = evaluate(model, ds, n_refs=3, n_augs=20, mig_refs=10, baseline=model)
    assert set(rep.transformed_mse) == {"rotate", "thicken"}
    p = tmp_path / "m.csv"
    rep.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "metric,family,value"
    assert len(lines) == 1 + len(rep.rows())
    assert "LPIPS" in rep.summary()
    assert all(v >= 0 for v in rep.transformed_mse.values())
    assert isinstance(rep, MetricsReport)
