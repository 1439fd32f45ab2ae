"""Dual-frequency reconstruction loss and its ablation modes.

``dual``      low_weight * MSE(low) + high_weight * L1(high residual)
``low_only``  MSE(low) alone
``high_only`` L1 against the full-resolution crop itself (no residual split)
``combined``  MSE between upsample(low) + high and the full-resolution crop;
              reported in the ``low`` column of the breakdown
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch

from .config import LossConfig
from .imaging import BandpassTargets, bicubic_weights


class TargetTensors(NamedTuple):
    low: torch.Tensor      # (B, h, w, C)
    high: torch.Tensor     # (B, H, W, C)
    blur_hr: torch.Tensor  # (B, H, W, C)

    @property
    def hr(self) -> torch.Tensor:
        return self.high + self.blur_hr


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    low: torch.Tensor
    high: torch.Tensor

    def as_floats(self) -> dict:
        return {"loss_total": float(self.total.detach()), "loss_low": float(self.low.detach()),
                "loss_high": float(self.high.detach())}


def stack_targets(targets, dtype=torch.float32) -> TargetTensors:
    """Batch a list of :class:`BandpassTargets` (or a single one) into tensors."""
    if isinstance(targets, BandpassTargets):
        targets = [targets]
    as_t = lambda arrs: torch.as_tensor(np.stack(arrs), dtype=dtype)  # noqa: E731
    return TargetTensors(
        as_t([t.low.pixels for t in targets]),
        as_t([t.high.pixels for t in targets]),
        as_t([t.blur_hr.pixels for t in targets]),
    )


def upsample_bicubic(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable bicubic upsampling of (B, H, W, C) with the imaging kernel."""
    _, h, w, _ = x.shape
    wh = torch.tensor(bicubic_weights(h, out_h), dtype=x.dtype)
    ww = torch.tensor(bicubic_weights(w, out_w), dtype=x.dtype)
    return torch.einsum("ih,bhwc,jw->bijc", wh, x, ww)


def _check(pred, target, name):
    if pred.shape != target.shape:
        raise ValueError(f"{name} prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")


def pixel_mask(patch_mask: torch.Tensor, patch_size: int, channels: int) -> torch.Tensor:
    """Expand a (B, N) patch mask to a (B, H, W, C) float pixel mask."""
    b, n = patch_mask.shape
    g = int(round(n ** 0.5))
    m = patch_mask.reshape(b, g, 1, g, 1, 1).float()
    m = m.expand(b, g, patch_size, g, patch_size, channels)
    return m.reshape(b, g * patch_size, g * patch_size, channels)


def reconstruction_loss(low_pred, high_pred, targets, cfg: LossConfig | None = None, *,
                        patch_mask: torch.Tensor | None = None, patch_size: int | None = None
                        ) -> LossBreakdown:
    """Weighted loss plus per-term breakdown; unused terms are reported as 0."""
    cfg = cfg or LossConfig()
    cfg.validate()
    if not isinstance(targets, TargetTensors):
        targets = stack_targets(targets, dtype=(low_pred if low_pred is not None else high_pred).dtype)
    zero = torch.zeros((), dtype=targets.low.dtype)
    low_term = high_term = zero
    mode = cfg.target_mode

    if mode in ("dual", "low_only"):
        _check(low_pred, targets.low, "low")
        sq = (low_pred - targets.low) ** 2
        if cfg.masked_only_low and patch_mask is not None:
            pm = pixel_mask(patch_mask, patch_size, sq.shape[-1]).to(sq.dtype)
            low_term = (sq * pm).sum() / pm.sum().clamp_min(1.0)
        else:
            low_term = sq.mean()
    if mode == "dual":
        _check(high_pred, targets.high, "high")
        high_term = (high_pred - targets.high).abs().mean()
    elif mode == "high_only":
        hr = targets.hr
        _check(high_pred, hr, "high")
        high_term = (high_pred - hr).abs().mean()
    elif mode == "combined":
        hr = targets.hr
        _, h, w, _ = hr.shape
        recon = upsample_bicubic(low_pred, h, w) + high_pred
        _check(recon, hr, "combined")
        low_term = ((recon - hr) ** 2).mean()

    if mode == "combined":
        total = low_term
    else:
        total = cfg.low_weight * low_term + cfg.high_weight * high_term
    return LossBreakdown(total, low_term, high_term)
