"""Three-stage decoder: transformer decoding, transpose-conv upsampling, Laplacian blocks.

Each Laplacian branch is a chain of feature-mapping blocks, an optional
learnable x2 upsampler, and a reconstruction block that upsamples x4 to
RGB. A branch reads either the 2x or the 4x map from the upsampling
stage; :func:`branch_wiring` picks the larger map that still reaches the
branch's output size with a whole number of x2 upsamplers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import DecoderConfig
from .encoder import Block, TokenSequence, init_weights, posenc_table
from .patching import MaskPlan, scatter_batch


@dataclass
class FeatureMap:
    values: torch.Tensor  # (B, C, side, side)

    @property
    def side(self) -> int:
        return self.values.shape[-1]


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class FeatureMappingBlock(nn.Module):
    """3x3 depth-wise conv + GELU, then 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.dw = nn.Conv2d(in_ch, in_ch, 3, padding=1, groups=in_ch)
        self.act = nn.GELU()
        self.pw = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.pw(self.act(self.dw(x)))


class UpsampleBlock(nn.Module):
    """``n_layers`` 2x2 stride-2 transpose convs with LayerNorm + GELU between them."""

    def __init__(self, ch: int, n_layers: int):
        super().__init__()
        layers = []
        for i in range(n_layers):
            if i:
                layers += [LayerNorm2d(ch, eps=1e-6), nn.GELU()]
            layers.append(nn.ConvTranspose2d(ch, ch, 2, stride=2))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class ReconstructionBlock(nn.Module):
    """4x4/s2 transpose conv, 3x3 depth-wise, 1x1, 2x2/s2 transpose conv to RGB (x4 total)."""

    def __init__(self, ch: int, out_ch: int):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(ch, ch, 4, stride=2, padding=1)
        self.dw = nn.Conv2d(ch, ch, 3, padding=1, groups=ch)
        self.pw = nn.Conv2d(ch, ch, 1)
        self.up2 = nn.ConvTranspose2d(ch, out_ch, 2, stride=2)

    def forward(self, x):
        return self.up2(self.pw(self.dw(self.up1(x))))


class LaplacianBlock(nn.Module):
    def __init__(self, in_ch: int, ch: int, out_ch: int, n_fmb: int = 2, n_up: int = 0):
        super().__init__()
        chans = [in_ch] + [ch] * n_fmb
        self.feature_maps = nn.Sequential(
            *(FeatureMappingBlock(chans[i], chans[i + 1]) for i in range(n_fmb))
        )
        width = chans[-1]
        self.upsample = UpsampleBlock(width, n_up)
        self.reconstruct = ReconstructionBlock(width, out_ch)
        self.factor = 4 * 2 ** n_up

    def forward(self, x):
        return self.reconstruct(self.upsample(self.feature_maps(x)))


def branch_wiring(grid_side: int, out_size: int) -> tuple[int, int]:
    """Return (source multiplier in {4, 2}, number of x2 upsample layers) for one branch."""
    for mult in (4, 2):
        ratio = out_size / (4 * grid_side * mult)
        if ratio >= 1 and ratio == int(ratio) and (int(ratio) & (int(ratio) - 1)) == 0:
            return mult, int(math.log2(ratio))
    raise ValueError(
        f"output size {out_size} unreachable from token grid {grid_side}: it must equal "
        f"{8 * grid_side} or {16 * grid_side} times a power of two"
    )


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, encoder_dim: int, grid_side: int, out_chans: int = 3,
                 use_gsd_posenc: bool = True, use_class_token: bool = True,
                 reference_gsd: float = 1.0, orientation: str = "ground"):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.grid_side = grid_side
        self.use_class_token = use_class_token
        self.use_gsd_posenc = use_gsd_posenc if cfg.use_gsd_posenc is None else cfg.use_gsd_posenc
        self.reference_gsd = reference_gsd
        self.orientation = orientation
        dd = cfg.decode_dim
        self.decoder_embed = nn.Linear(encoder_dim, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.blocks = nn.ModuleList(Block(dd, cfg.num_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.decode_depth))
        self.norm = nn.LayerNorm(dd, eps=1e-6)
        self.up1 = nn.ConvTranspose2d(dd, dd, 2, stride=2)
        self.up_norm = LayerNorm2d(dd, eps=1e-6)
        self.up_act = nn.GELU()
        self.up2 = nn.ConvTranspose2d(dd, dd, 2, stride=2)
        self.low_source, low_up = branch_wiring(grid_side, cfg.low_out_size)
        self.high_source, high_up = branch_wiring(grid_side, cfg.high_out_size)
        ch = cfg.lb_channels
        n_fmb = cfg.feature_map_blocks_per_lb
        self.low_lb = LaplacianBlock(dd, ch, out_chans, n_fmb, low_up)
        self.high_lb = LaplacianBlock(dd, ch, out_chans, n_fmb, high_up)
        self.apply(init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def decode_tokens(self, latents: torch.Tensor, visible_idx: torch.Tensor, gsd) -> torch.Tensor:
        """latents (B, [1+]V, D_enc) -> (B, N, decode_dim) patch tokens, class token dropped."""
        x = self.decoder_embed(latents)
        n = self.grid_side ** 2
        cls = None
        if self.use_class_token:
            cls, x = x[:, :1], x[:, 1:]
        if x.shape[1] != visible_idx.shape[1]:
            raise ValueError(f"{x.shape[1]} latent tokens for {visible_idx.shape[1]} visible indices")
        x = scatter_batch(x, visible_idx, n, self.mask_token)
        pos = posenc_table(self.grid_side, self.cfg.decode_dim, gsd, self.use_gsd_posenc,
                           reference_gsd=self.reference_gsd, orientation=self.orientation,
                           dtype=x.dtype)
        x = x + pos
        if cls is not None:
            x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        if self.blocks:
            x = self.norm(x)
        return x[:, 1:] if cls is not None else x

    def upsample(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = tokens.shape
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"token count {n} is not a square grid")
        x = tokens.transpose(1, 2).reshape(b, d, side, side)
        map2 = self.up1(x)
        map4 = self.up2(self.up_act(self.up_norm(map2)))
        return map2, map4

    def reconstruct(self, map2, map4):
        maps = {2: map2, 4: map4}
        low = self.low_lb(maps[self.low_source])
        high = self.high_lb(maps[self.high_source])
        # channels-last to match pixel arrays
        return low.permute(0, 2, 3, 1), high.permute(0, 2, 3, 1)

    def forward(self, latents, visible_idx, gsd):
        tokens = self.decode_tokens(latents, visible_idx, gsd)
        return self.reconstruct(*self.upsample(tokens))


class VanillaMAEDecoder(nn.Module):
    """Transformer-only MAE decoder predicting pixels per patch; used for size comparisons."""

    def __init__(self, encoder_dim: int, decode_dim: int, depth: int, num_heads: int,
                 patch_size: int, in_chans: int = 3, mlp_ratio: float = 4.0):
        super().__init__()
        self.decoder_embed = nn.Linear(encoder_dim, decode_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, decode_dim))
        self.blocks = nn.ModuleList(Block(decode_dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(decode_dim, eps=1e-6)
        self.pred = nn.Linear(decode_dim, patch_size ** 2 * in_chans)


def decode_tokens(latents: TokenSequence, plan: MaskPlan, gsd: float, decoder: Decoder) -> TokenSequence:
    idx = torch.as_tensor(plan.visible_idx, dtype=torch.long).unsqueeze(0)
    out = decoder.decode_tokens(latents.tokens.unsqueeze(0), idx, [gsd])
    return TokenSequence(out[0], "full-with-mask-tokens")


def upsample_stage(tokens: TokenSequence, decoder: Decoder) -> tuple[FeatureMap, FeatureMap]:
    map2, map4 = decoder.upsample(tokens.tokens.unsqueeze(0))
    return FeatureMap(map2), FeatureMap(map4)


def laplacian_block(fm: FeatureMap, role: str, decoder: Decoder) -> torch.Tensor:
    """Run the ``low`` or ``high`` branch on a feature map; returns (B, H, W, C)."""
    if role not in ("low", "high"):
        raise ValueError(f"role must be 'low' or 'high', got {role!r}")
    block = decoder.low_lb if role == "low" else decoder.high_lb
    target = decoder.cfg.low_out_size if role == "low" else decoder.cfg.high_out_size
    if fm.side * block.factor != target:
        raise ValueError(
            f"{role} branch upsamples x{block.factor}; feature map side must be "
            f"{target / block.factor:g}, got {fm.side}"
        )
    return block(fm.values).permute(0, 2, 3, 1)


def decode_forward(latents: TokenSequence, plan: MaskPlan, gsd: float, decoder: Decoder):
    idx = torch.as_tensor(plan.visible_idx, dtype=torch.long).unsqueeze(0)
    low, high = decoder(latents.tokens.unsqueeze(0), idx, [gsd])
    return low[0], high[0]
