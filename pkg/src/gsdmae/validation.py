"""Input validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

import math
from numbers import Real

import numpy as np
from sklearn.utils.validation import check_array

from .imaging import RasterImage


def check_gsd(gsd, n: int | None = None) -> np.ndarray:
    """Broadcast a scalar or per-sample gsd to a positive float array of length ``n``."""
    arr = np.atleast_1d(np.asarray(gsd, dtype=np.float64))
    if n is not None:
        if arr.size == 1:
            arr = np.full(n, arr.item())
        elif arr.size != n:
            raise ValueError(f"got {arr.size} gsd values for {n} images")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"gsd values must be positive and finite, got {arr}")
    return arr


def check_raster(x, gsd=None) -> RasterImage:
    if isinstance(x, RasterImage):
        if gsd is not None and not math.isclose(float(np.asarray(gsd).item()), x.gsd):
            raise ValueError(f"gsd {gsd} conflicts with the image's own gsd {x.gsd}")
        return x
    if gsd is None:
        raise ValueError("a plain array needs an explicit gsd")
    return RasterImage(np.asarray(x, dtype=np.float64), float(check_gsd(gsd, 1)[0]))


def check_images(X, gsd=None) -> list[RasterImage]:
    """Accept RasterImages, a list of (H, W, C) arrays or one (N, H, W, C) array."""
    if isinstance(X, RasterImage):
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    X = list(X)
    if not X:
        raise ValueError("no images given")
    if all(isinstance(x, RasterImage) for x in X):
        if gsd is not None:
            g = check_gsd(gsd, len(X))
            return [check_raster(x, gi) for x, gi in zip(X, g)]
        return X
    if gsd is None:
        raise ValueError("array inputs need gsd (scalar or one per image)")
    g = check_gsd(gsd, len(X))
    return [check_raster(x, gi) for x, gi in zip(X, g)]


def check_square(images: list[RasterImage], min_side: int, what: str = "image") -> None:
    for i, im in enumerate(images):
        if min(im.shape[:2]) < min_side:
            raise ValueError(f"{what} {i} is {im.height}x{im.width}, needs at least {min_side}px")


def check_features(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


def check_fraction(name: str, value, low: float = 0.0, high: float = 1.0) -> float:
    if not isinstance(value, Real) or not low < value < high:
        raise ValueError(f"{name} must lie strictly between {low} and {high}, got {value!r}")
    return float(value)
