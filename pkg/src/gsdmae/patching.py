"""Patchify/unpatchify, seeded random masking and mask-token scattering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .imaging import RasterImage


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """Row-major patches; each row is a (P, P, C) block flattened in C order."""

    patches: np.ndarray
    grid_side: int
    patch_size: int
    source_gsd: float
    channels: int = 3

    def __post_init__(self):
        n, length = self.patches.shape
        if n != self.grid_side ** 2:
            raise ValueError(f"{n} patches do not form a {self.grid_side}x{self.grid_side} grid")
        if length != self.patch_size ** 2 * self.channels:
            raise ValueError(
                f"patch length {length} != P^2*C = {self.patch_size}^2*{self.channels}"
            )

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True, eq=False)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    mask_ratio: float
    seed: object = None

    @property
    def n_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    def mask_vector(self) -> np.ndarray:
        """Boolean array, True where the patch is hidden from the encoder."""
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.masked_idx] = True
        return m


def patchify(img: RasterImage, patch_size: int) -> PatchGrid:
    h, w, c = img.shape
    if h != w:
        raise ValueError(f"patchify expects a square image, got {h}x{w}")
    if h % patch_size:
        pad = (-h) % patch_size
        raise ValueError(
            f"image side {h} is not divisible by patch size {patch_size}; pad by {pad} px"
        )
    g = h // patch_size
    p = patch_size
    patches = img.pixels.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * c)
    return PatchGrid(patches, g, p, img.gsd, c)


def unpatchify(pg: PatchGrid) -> RasterImage:
    g, p, c = pg.grid_side, pg.patch_size, pg.channels
    pixels = pg.patches.reshape(g, g, p, p, c).transpose(0, 2, 1, 3, 4).reshape(g * p, g * p, c)
    return RasterImage(pixels, pg.source_gsd)


def patchify_tensor(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, N, P*P*C), same layout as :func:`patchify`."""
    b, h, w, c = x.shape
    g, p = h // patch_size, patch_size
    return x.reshape(b, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * c)


def visible_count(n_patches: int, mask_ratio: float) -> int:
    # Python's round() is ties-to-even.
    return int(round(n_patches * (1.0 - mask_ratio)))


def sample_mask(n_patches: int, mask_ratio: float, seed) -> MaskPlan:
    """Uniform subset of visible patches via seeded shuffle-and-split."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n_vis = visible_count(n_patches, mask_ratio)
    if n_vis < 1:
        raise ValueError(f"mask_ratio {mask_ratio} leaves no visible patch out of {n_patches}")
    perm = np.random.default_rng(seed).permutation(n_patches)
    return MaskPlan(np.sort(perm[:n_vis]), np.sort(perm[n_vis:]), float(mask_ratio), seed)


def full_plan(n_patches: int) -> MaskPlan:
    """Plan with every patch visible (evaluation / feature extraction)."""
    return MaskPlan(np.arange(n_patches), np.array([], dtype=int), 0.0, None)


def scatter_with_mask_tokens(visible_tokens, plan: MaskPlan, mask_token):
    """Place encoded tokens at their grid index; every other slot gets ``mask_token``."""
    visible_tokens = torch.as_tensor(visible_tokens)
    mask_token = torch.as_tensor(mask_token, dtype=visible_tokens.dtype)
    if visible_tokens.shape[0] != len(plan.visible_idx):
        raise ValueError(
            f"got {visible_tokens.shape[0]} visible tokens for a plan with {len(plan.visible_idx)}"
        )
    out = mask_token.reshape(1, -1).expand(plan.n_patches, -1).clone()
    out[torch.as_tensor(plan.visible_idx, dtype=torch.long)] = visible_tokens
    return out


def scatter_batch(visible: torch.Tensor, visible_idx: torch.Tensor, n_patches: int,
                  mask_token: torch.Tensor) -> torch.Tensor:
    """Batched scatter: visible (B, V, D), visible_idx (B, V) -> (B, N, D)."""
    b, v, d = visible.shape
    if visible_idx.shape != (b, v):
        raise ValueError(f"visible_idx shape {tuple(visible_idx.shape)} != {(b, v)}")
    base = mask_token.reshape(1, 1, d).expand(b, n_patches, d)
    index = visible_idx.unsqueeze(-1).expand(b, v, d)
    return base.scatter(1, index, visible)
