"""Encoder + Laplacian decoder composite and parameter accounting."""
from __future__ import annotations

import torch
from torch import nn

from .config import TrainConfig
from .decoder import Decoder, VanillaMAEDecoder
from .encoder import Encoder


class ScaleAwareMAE(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        enc, dec = cfg.encoder, cfg.decoder
        self.cfg = cfg
        self.encoder = Encoder(enc)
        self.decoder = Decoder(
            dec, enc.embed_dim, enc.grid_side, enc.in_chans,
            use_gsd_posenc=enc.use_gsd_posenc, use_class_token=enc.use_class_token,
            reference_gsd=enc.reference_gsd, orientation=enc.gsd_factor_orientation,
        )

    def forward(self, patches: torch.Tensor, visible_idx: torch.Tensor, gsd):
        latents = self.encoder(patches, visible_idx, gsd)
        return self.decoder(latents, visible_idx, gsd)


def build_model(cfg: TrainConfig, seed: int | None = None, device=None) -> ScaleAwareMAE:
    """Construct the model; parameter init is a pure function of ``seed``."""
    if device is not None and str(device) == "meta":
        with torch.device("meta"):
            return ScaleAwareMAE(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed if seed is None else seed)
        return ScaleAwareMAE(cfg)


def _count(module: nn.Module | None) -> int:
    if module is None:
        return 0
    if isinstance(module, nn.Parameter):
        return module.numel()
    return sum(p.numel() for p in module.parameters())


def param_count(model: ScaleAwareMAE) -> dict[str, int]:
    """Exact per-module parameter counts plus decoder/total sums."""
    enc, dec = model.encoder, model.decoder
    counts = {
        "encoder.patch_embed": _count(enc.patch_embed),
        "encoder.cls_token": _count(enc.cls_token),
        "encoder.blocks": _count(enc.blocks),
        "encoder.norm": _count(enc.norm),
        "decoder.embed": _count(dec.decoder_embed),
        "decoder.mask_token": _count(dec.mask_token),
        "decoder.blocks": _count(dec.blocks),
        "decoder.norm": _count(dec.norm),
        "decoder.upsample": _count(dec.up1) + _count(dec.up_norm) + _count(dec.up2),
        "decoder.low_lb": _count(dec.low_lb),
        "decoder.high_lb": _count(dec.high_lb),
    }
    counts["encoder.total"] = _count(enc)
    counts["decoder.total"] = _count(dec)
    counts["total"] = _count(model)
    assert counts["total"] == counts["encoder.total"] + counts["decoder.total"]
    return counts


def vanilla_param_count(cfg: TrainConfig, depth: int = 8) -> dict[str, int]:
    """Counts for the same encoder paired with a transformer-only MAE decoder of ``depth`` blocks."""
    enc, dec = cfg.encoder, cfg.decoder
    with torch.device("meta"):
        encoder = Encoder(enc)
        vanilla = VanillaMAEDecoder(enc.embed_dim, dec.decode_dim, depth, dec.num_heads,
                                    enc.patch_size, enc.in_chans, dec.mlp_ratio)
    e, d = _count(encoder), _count(vanilla)
    return {"encoder.total": e, "decoder.total": d, "total": e + d}
