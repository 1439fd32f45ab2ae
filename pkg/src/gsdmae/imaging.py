"""Raster images with ground sample distance, resampling and band-pass targets.

Downsampling uses exact area averaging over pixel footprints; upsampling
uses a separable bicubic (Keys, a=-0.5) kernel with edge clamping. Both
kernels are expressed as dense 1-D weight matrices whose rows sum to one,
so constant images stay constant under any resize.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

BICUBIC_A = -0.5


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Pixel array (H, W, C) tagged with its ground sample distance in m/px."""

    pixels: np.ndarray
    gsd: float

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or min(pixels.shape) < 1:
            raise ValueError(f"pixels must be a non-empty H x W x C array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("pixels contain non-finite values")
        gsd = float(self.gsd)
        if not (gsd > 0 and math.isfinite(gsd)):
            raise ValueError(f"gsd must be a positive finite number, got {self.gsd!r}")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "gsd", gsd)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "RasterImage":
        return RasterImage(pixels, self.gsd)


@dataclass(frozen=True)
class BandpassTargets:
    """Reconstruction targets derived from one high-resolution crop.

    ``low`` lives at the network input resolution. ``high`` is the signed
    residual ``hr - blur_hr`` at the crop resolution.
    """

    low: RasterImage
    high: RasterImage
    blur_hr: RasterImage

    @property
    def hr(self) -> np.ndarray:
        return self.high.pixels + self.blur_hr.pixels


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


@lru_cache(maxsize=256)
def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging input pixels over each output footprint."""
    if n_out > n_in:
        raise ValueError("area_weights only downsamples")
    scale = n_in / n_out
    edges_lo = np.arange(n_out)[:, None] * scale
    edges_hi = edges_lo + scale
    pix = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(edges_hi, pix + 1) - np.maximum(edges_lo, pix), 0.0, None)
    w = overlap / scale
    w /= w.sum(axis=1, keepdims=True)
    w.flags.writeable = False
    return w


@lru_cache(maxsize=256)
def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bicubic interpolation matrix, half-pixel centres, clamped edges."""
    if n_out < n_in:
        raise ValueError("bicubic_weights only upsamples")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = base + tap
        coef = _cubic(src - idx)
        np.add.at(w, (rows, np.clip(idx, 0, n_in - 1)), coef)
    w /= w.sum(axis=1, keepdims=True)
    w.flags.writeable = False
    return w


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    if n_out == n_in:
        return np.eye(n_in)
    if n_out < n_in:
        return area_weights(n_in, n_out)
    return bicubic_weights(n_in, n_out)


def resize_array(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable resize of an (H, W, C) array; no gsd bookkeeping."""
    h, w = pixels.shape[:2]
    wh = resize_weights(h, out_h)
    ww = resize_weights(w, out_w)
    return np.einsum("ih,hwc,jw->ijc", wh, pixels, ww, optimize=True)


def resample(img: RasterImage, out_h: int, out_w: int) -> RasterImage:
    """Resize ``img`` and rescale its gsd so that the ground footprint is unchanged."""
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if out_h * img.width != out_w * img.height:
        raise ValueError(
            f"anisotropic resample {img.height}x{img.width} -> {out_h}x{out_w}: "
            "a single gsd cannot describe unequal axis scales"
        )
    if (out_h, out_w) == (img.height, img.width):
        return RasterImage(img.pixels.copy(), img.gsd)
    gsd = img.gsd * (img.height / out_h)
    return RasterImage(resize_array(img.pixels, out_h, out_w), gsd)


def crop_offsets(height: int, width: int, size: int, rng_seed) -> tuple[int, int]:
    """Top-left corner of a uniformly drawn ``size`` crop; first row, then column."""
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_scaled_crop(img: RasterImage, size: int, rng_seed) -> RasterImage:
    """Square crop at a seeded random offset. Cropping never changes gsd."""
    if img.height < size or img.width < size:
        raise ValueError(
            f"image {img.height}x{img.width} is smaller than crop {size}; resample it first"
        )
    top, left = crop_offsets(img.height, img.width, size, rng_seed)
    return RasterImage(img.pixels[top : top + size, left : left + size].copy(), img.gsd)


def center_square(img: RasterImage) -> RasterImage:
    side = min(img.height, img.width)
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    return RasterImage(img.pixels[top : top + side, left : left + side].copy(), img.gsd)


def make_input(hr: RasterImage, input_size: int) -> RasterImage:
    """Network input: ``hr`` downsampled to ``input_size`` square."""
    if hr.height != hr.width:
        raise ValueError("make_input expects a square crop")
    if input_size > hr.height:
        raise ValueError(f"input_size {input_size} exceeds crop size {hr.height}")
    return resample(hr, input_size, input_size)


def build_targets(hr: RasterImage, input_size: int, r_low: int, r_high_low: int) -> BandpassTargets:
    """Low-frequency target at input size and signed high-frequency residual at crop size."""
    if hr.height != hr.width:
        raise ValueError("build_targets expects a square crop")
    if r_low < 1 or r_high_low < 1:
        raise ValueError(f"band sizes must be >= 1, got r_low={r_low}, r_high_low={r_high_low}")
    if not r_low < input_size <= hr.height:
        raise ValueError(f"need r_low < input_size <= crop size, got {r_low}, {input_size}, {hr.height}")
    if r_high_low >= hr.height:
        raise ValueError(f"r_high_low {r_high_low} must be below crop size {hr.height}")
    side = hr.height
    low = resample(resample(hr, r_low, r_low), input_size, input_size)
    blur_hr = resample(resample(hr, r_high_low, r_high_low), side, side)
    high = RasterImage(hr.pixels - blur_hr.pixels, hr.gsd)
    return BandpassTargets(low=low, high=high, blur_hr=blur_hr)


def load_image(path, gsd: float) -> RasterImage:
    """Read a PNG/TIFF (or .npy float array) into [0, 1] floats."""
    path = Path(path)
    if path.suffix == ".npy":
        return RasterImage(np.load(path), gsd)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return RasterImage(arr, gsd)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: RasterImage | np.ndarray, path) -> None:
    """Write pixels to an 8-bit PNG; values are clipped to [0, 1] for display only."""
    pixels = img.pixels if isinstance(img, RasterImage) else np.asarray(img)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(to_uint8(pixels)).save(path)
