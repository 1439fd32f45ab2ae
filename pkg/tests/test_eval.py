import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gsdmae import config as config_mod
from gsdmae.encoder import Encoder
from gsdmae.eval import (
    FeatureSet, KnnReport, encode_images, extract_features, knn_classify, knn_predict,
    multiscale_eval, prepare_eval_image, report_from_features,
)
from gsdmae.imaging import RasterImage, make_input
from gsdmae.pipeline import DatasetManifest


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@given(st.integers(0, 2**31), st.integers(5, 120), st.integers(2, 12), st.integers(2, 5),
       st.sampled_from([1, 5, 20]))
@settings(max_examples=40, deadline=None)
def test_knn_matches_brute_force(seed, n, d, n_classes, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    tx, ty = rng.normal(size=(n, d)), rng.integers(0, n_classes, n)
    vx = rng.normal(size=(30, d))
    assert knn_predict(tx, ty, vx, k).tolist() == oracles.knn_brute(tx.tolist(), ty.tolist(), vx.tolist(), k)


def test_gaussian_clusters_perfect():
    rng = np.random.default_rng(0)
    centers = np.eye(8)[:2] * 10
    tx = np.concatenate([centers[c] + rng.normal(0, 0.3, (50, 8)) for c in (0, 1)])
    ty = np.repeat([0, 1], 50)
    vx = np.concatenate([centers[c] + rng.normal(0, 0.3, (20, 8)) for c in (0, 1)])
    vy = np.repeat([0, 1], 20)
    acc = knn_classify(FeatureSet(unit(tx), ty, 100.0), FeatureSet(unit(vx), vy, 100.0), 20)
    assert acc == 1.0


def test_exact_copy_k1():
    rng = np.random.default_rng(1)
    tx = unit(rng.normal(size=(10, 4)))
    ty = np.arange(10) % 3
    assert knn_predict(tx, ty, tx[[4, 7]], 1).tolist() == [ty[4], ty[7]]


def test_scale_invariance_of_cosine():
    rng = np.random.default_rng(2)
    tx, ty, vx = rng.normal(size=(40, 6)), rng.integers(0, 3, 40), rng.normal(size=(15, 6))
    np.testing.assert_array_equal(knn_predict(tx, ty, vx, 5), knn_predict(7 * tx, ty, vx / 3, 5))


def test_vote_tie_goes_to_lowest_class():
    tx = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert knn_predict(tx, [5, 2], [[1.0, 0.0]], 2).tolist() == [2]


def test_distance_tie_prefers_lower_index():
    tx = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert knn_predict(tx, [1, 0, 0], [[1.0, 0.0]], 1).tolist() == [1]


def test_knn_argument_errors():
    with pytest.raises(ValueError):
        knn_predict(np.eye(3), [0, 1, 2], np.eye(3), 4)
    with pytest.raises(ValueError):
        knn_predict(np.eye(3), [0, 1, 2], np.ones((1, 2)), 1)


def test_feature_set_checks_norm(tmp_path):
    with pytest.raises(ValueError, match="unit norm"):
        FeatureSet(np.ones((2, 3)), [0, 1], 100.0)
    fs = FeatureSet(unit(np.ones((2, 3))), [0, 1], 50.0, "d")
    fs.save(tmp_path / "f.npz")
    back = FeatureSet.load(tmp_path / "f.npz")
    np.testing.assert_array_equal(back.features, fs.features)
    assert back.scale_pct == 50.0 and back.dataset_name == "d"


def toy_encoder():
    torch.manual_seed(0)
    return Encoder(config_mod.preset("toy").encoder)


def test_identical_images_identical_features():
    enc = toy_encoder()
    img = RasterImage(np.random.default_rng(0).random((64, 64, 3)), 0.5)
    f = encode_images(enc, [img, img])
    np.testing.assert_array_equal(f[0], f[1])
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)


def test_full_scale_equals_direct_encoding(small_data):
    enc = toy_encoder()
    sub = small_data.subset(range(4))
    fs = extract_features(enc, sub, 100.0)
    # bypass path: center crop by hand, then a single resize to the input size
    direct = []
    for i in range(len(sub)):
        px = sub.load(i).pixels
        direct.append(make_input(RasterImage(px, sub.entries[i].gsd), 64))
    np.testing.assert_allclose(fs.features, encode_images(enc, direct), atol=1e-12)


def test_eval_image_gsd_tracks_scale():
    img = RasterImage(np.zeros((160, 160, 3)), 0.5)
    out = prepare_eval_image(img, 25.0, 64)
    assert out.shape == (64, 64, 3)
    assert out.gsd == pytest.approx(0.5 * 160 / 64)


def test_tiny_scale_skipped_with_warning(tmp_path):
    img = RasterImage(np.random.default_rng(0).random((48, 48, 3)), 1.0)
    m = DatasetManifest.from_images([img], [0])
    with pytest.warns(UserWarning, match="smaller than one"):
        assert extract_features(toy_encoder(), m, 12.5) is None


def test_multiscale_report_cardinality_and_determinism(small_data, tmp_path):
    enc = toy_encoder()
    train, val = small_data.subset(range(8)), small_data.subset(range(8, 12))
    rep = multiscale_eval(enc, {"syn": (train, val)}, ks=(1, 5))
    assert len(rep.rows) == 4 * 2
    again = multiscale_eval(enc, {"syn": (train, val)}, ks=(1, 5))
    assert rep.rows == again.rows
    rep.write_csv(tmp_path / "r.csv")
    back = KnnReport.read_csv(tmp_path / "r.csv")
    assert back.rows == rep.rows
    assert 0.0 <= back.accuracy("syn", 12.5, 5) <= 1.0


def test_report_from_features_rows():
    fs = FeatureSet(unit(np.eye(3)), [0, 1, 2], 100.0, "x")
    rep = report_from_features(fs, [fs], ks=[1, 2])
    assert [r["k"] for r in rep.rows] == [1, 2]
    assert rep.accuracy("x", 100.0, 1) == 1.0
