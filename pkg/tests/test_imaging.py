import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdmae.imaging import (
    RasterImage, area_weights, bicubic_weights, build_targets, center_square, crop_offsets,
    load_image, make_input, random_scaled_crop, resample, save_image,
)


def brute_area_average(pixels, out):
    """Average over each output pixel's footprint, one input pixel at a time."""
    h, w, c = pixels.shape
    sy, sx = h / out, w / out
    res = np.zeros((out, out, c))
    for i in range(out):
        for j in range(out):
            acc = np.zeros(c)
            total = 0.0
            for y in range(h):
                oy = max(0.0, min((i + 1) * sy, y + 1) - max(i * sy, y))
                for x in range(w):
                    ox = max(0.0, min((j + 1) * sx, x + 1) - max(j * sx, x))
                    acc += oy * ox * pixels[y, x]
                    total += oy * ox
            res[i, j] = acc / total
    return res


def test_ramp_downsample_matches_area_oracle():
    ramp = np.arange(16, dtype=float).reshape(4, 4, 1)
    out = resample(RasterImage(ramp, 1.0), 2, 2)
    np.testing.assert_allclose(out.pixels, brute_area_average(ramp, 2), rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.pixels[..., 0], [[2.5, 4.5], [10.5, 12.5]])


def test_non_integer_area_factor_matches_oracle():
    rng = np.random.default_rng(3)
    px = rng.random((7, 7, 2))
    out = resample(RasterImage(px, 0.5), 3, 3)
    np.testing.assert_allclose(out.pixels, brute_area_average(px, 3), atol=1e-12)


@pytest.mark.parametrize("out", [1, 3, 16, 48, 100])
def test_constant_image_stays_constant(out):
    img = RasterImage(np.full((32, 32, 3), 0.5), 0.3)
    res = resample(img, out, out)
    np.testing.assert_allclose(res.pixels, 0.5, atol=1e-12)
    assert math.isclose(res.gsd, 0.3 * 32 / out)


def test_halving_doubles_gsd():
    img = RasterImage(np.zeros((448, 448, 3)), 0.3)
    out = resample(img, 224, 224)
    assert out.shape == (224, 224, 3)
    assert math.isclose(out.gsd, 0.6, rel_tol=1e-12)


@given(st.integers(8, 64), st.integers(2, 64), st.integers(2, 64), st.floats(0.05, 10.0))
@settings(max_examples=60, deadline=None)
def test_gsd_chain_rule(n0, n1, n2, gsd):
    img = RasterImage(np.zeros((n0, n0, 1)), gsd)
    twice = resample(resample(img, n1, n1), n2, n2)
    once = resample(img, n2, n2)
    assert math.isclose(twice.gsd, once.gsd, rel_tol=1e-12)


def test_weight_rows_sum_to_one():
    for a, b in [(9, 4), (56, 14), (448, 224)]:
        np.testing.assert_allclose(area_weights(a, b).sum(1), 1.0, atol=1e-12)
    for a, b in [(4, 9), (14, 224), (56, 448)]:
        np.testing.assert_allclose(bicubic_weights(a, b).sum(1), 1.0, atol=1e-12)


def test_anisotropic_resample_rejected():
    with pytest.raises(ValueError, match="anisotropic"):
        resample(RasterImage(np.zeros((8, 8, 3)), 1.0), 4, 2)


def test_identity_resample_copies():
    img = RasterImage(np.random.default_rng(0).random((8, 8, 3)), 2.0)
    out = resample(img, 8, 8)
    np.testing.assert_array_equal(out.pixels, img.pixels)
    assert out.gsd == img.gsd and out.pixels is not img.pixels


def test_invalid_images_rejected():
    with pytest.raises(ValueError):
        RasterImage(np.zeros((4, 4, 3)), 0.0)
    bad = np.zeros((4, 4, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        RasterImage(bad, 1.0)


def test_crop_offsets_match_reference_draw():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        expected = (int(rng.integers(0, 512 - 448 + 1)), int(rng.integers(0, 512 - 448 + 1)))
        assert crop_offsets(512, 512, 448, seed) == expected


def test_crop_content_and_determinism():
    px = np.random.default_rng(1).random((40, 50, 3))
    img = RasterImage(px, 0.7)
    a = random_scaled_crop(img, 16, [5, 1])
    b = random_scaled_crop(img, 16, [5, 1])
    np.testing.assert_array_equal(a.pixels, b.pixels)
    top, left = crop_offsets(40, 50, 16, [5, 1])
    np.testing.assert_array_equal(a.pixels, px[top : top + 16, left : left + 16])
    assert a.gsd == 0.7


def test_full_size_crop_is_identity():
    px = np.random.default_rng(2).random((12, 12, 3))
    out = random_scaled_crop(RasterImage(px, 1.0), 12, 99)
    np.testing.assert_array_equal(out.pixels, px)


def test_crop_too_large_errors():
    with pytest.raises(ValueError, match="resample it first"):
        random_scaled_crop(RasterImage(np.zeros((10, 10, 3)), 1.0), 12, 0)


def test_center_square():
    px = np.arange(6 * 10).reshape(6, 10, 1).astype(float)
    out = center_square(RasterImage(px, 1.0))
    np.testing.assert_array_equal(out.pixels, px[:, 2:8])


def test_make_input_full_size_chain():
    img = RasterImage(np.zeros((448, 448, 3)), 0.3)
    inp = make_input(img, 224)
    assert inp.shape == (224, 224, 3) and math.isclose(inp.gsd, 0.6)
    same = make_input(img, 448)
    np.testing.assert_array_equal(same.pixels, img.pixels)
    with pytest.raises(ValueError):
        make_input(img, 500)


def test_targets_shapes_full_size_chain():
    hr = RasterImage(np.random.default_rng(0).random((448, 448, 3)), 0.3)
    t = build_targets(hr, 224, 14, 56)
    assert t.low.shape == (224, 224, 3)
    assert t.high.shape == (448, 448, 3)
    assert t.blur_hr.shape == (448, 448, 3)
    np.testing.assert_allclose(t.high.pixels + t.blur_hr.pixels, hr.pixels, atol=1e-6)


def test_constant_image_band_split():
    hr = RasterImage(np.full((64, 64, 3), 0.25), 1.0)
    t = build_targets(hr, 32, 4, 16)
    np.testing.assert_allclose(t.low.pixels, 0.25, atol=1e-12)
    np.testing.assert_allclose(t.high.pixels, 0.0, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_band_split_identity_property(seed):
    rng = np.random.default_rng(seed)
    hr = RasterImage(rng.random((32, 32, 3)) * rng.uniform(0.1, 4.0), rng.uniform(0.1, 2.0))
    t = build_targets(hr, 16, 2, 8)
    assert np.max(np.abs(t.hr - hr.pixels)) <= 1e-5


def test_targets_bad_chain():
    hr = RasterImage(np.zeros((32, 32, 3)), 1.0)
    with pytest.raises(ValueError):
        build_targets(hr, 16, 16, 8)
    with pytest.raises(ValueError):
        build_targets(hr, 16, 2, 32)


def test_png_round_trip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (9, 9, 3)) / 255.0
    save_image(px, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png", 0.5)
    np.testing.assert_allclose(back.pixels, px, atol=1e-12)
    assert back.gsd == 0.5
