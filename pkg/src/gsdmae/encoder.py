"""Patch embedding and the ViT encoder over visible tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import EncoderConfig
from .patching import MaskPlan, PatchGrid
from .posenc import positional_rows


@dataclass
class TokenSequence:
    tokens: torch.Tensor
    provenance: str = "visible-only"

    def __post_init__(self):
        if not torch.isfinite(self.tokens).all():
            raise ValueError("token sequence contains non-finite values")


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def posenc_table(grid_side: int, dim: int, gsd, use_gsd: bool, *, reference_gsd=1.0,
                 orientation="ground", dtype=torch.float32) -> torch.Tensor:
    """(B, N, dim) positional rows for a batch of gsds (standard rows when ``use_gsd`` is off)."""
    gsd = np.atleast_1d(np.asarray(gsd, dtype=np.float64))
    if use_gsd:
        if np.any(gsd <= 0):
            raise ValueError(f"gsd must be positive for GSD positional encoding, got {gsd}")
        rows = [positional_rows(grid_side, dim, float(g), reference_gsd=reference_gsd,
                                orientation=orientation) for g in gsd]
    else:
        rows = [positional_rows(grid_side, dim, None)] * len(gsd)
    return torch.as_tensor(np.stack(rows), dtype=dtype)


class Encoder(nn.Module):
    """Linear patch projection, positional rows for visible tokens, class token, ViT blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        patch_dim = cfg.patch_size ** 2 * cfg.in_chans
        self.patch_embed = nn.Linear(patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim)) if cfg.use_class_token else None
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        self.apply(init_weights)
        if self.cls_token is not None:
            nn.init.normal_(self.cls_token, std=0.02)

    @property
    def grid_side(self) -> int:
        return self.cfg.grid_side

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        """Normalize raw [0, 1] patch pixels and project to ``embed_dim``."""
        x = (patches - self.cfg.norm_mean) / self.cfg.norm_std
        return self.patch_embed(x)

    def positional(self, gsd, dtype) -> torch.Tensor:
        return posenc_table(self.grid_side, self.cfg.embed_dim, gsd, self.cfg.use_gsd_posenc,
                            reference_gsd=self.cfg.reference_gsd,
                            orientation=self.cfg.gsd_factor_orientation, dtype=dtype)

    def encode_tokens(self, tokens: torch.Tensor, visible_idx: torch.Tensor, gsd) -> torch.Tensor:
        """tokens (B, V, D) already embedded; returns (B, [1+]V, D) after the blocks and norm."""
        pos = self.positional(gsd, tokens.dtype)
        if pos.shape[0] == 1 and tokens.shape[0] > 1:
            pos = pos.expand(tokens.shape[0], -1, -1)
        index = visible_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
        x = tokens + torch.gather(pos, 1, index)
        if self.cls_token is not None:
            # class token carries a zero positional row
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x) if self.blocks else x

    def forward(self, patches: torch.Tensor, visible_idx: torch.Tensor, gsd) -> torch.Tensor:
        """patches (B, N, P*P*C) raw pixels, visible_idx (B, V) sorted grid indices."""
        visible = torch.gather(
            patches, 1, visible_idx.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        )
        return self.encode_tokens(self.embed(visible), visible_idx, gsd)

    def patch_tokens(self, latents: torch.Tensor) -> torch.Tensor:
        return latents[:, 1:] if self.cls_token is not None else latents


def embed_patches(pg: PatchGrid, encoder: Encoder) -> TokenSequence:
    patches = torch.as_tensor(pg.patches, dtype=encoder.patch_embed.weight.dtype)
    if patches.shape[-1] != encoder.patch_embed.in_features:
        raise ValueError(
            f"patch length {patches.shape[-1]} != encoder input {encoder.patch_embed.in_features}"
        )
    return TokenSequence(encoder.embed(patches.unsqueeze(0))[0], "full")


def encode(seq: TokenSequence, plan: MaskPlan, gsd: float, encoder: Encoder) -> TokenSequence:
    """Encode the visible tokens of ``plan``; ``seq`` holds exactly those tokens in index order."""
    if seq.tokens.shape[0] != len(plan.visible_idx):
        raise ValueError(
            f"sequence has {seq.tokens.shape[0]} tokens, plan has {len(plan.visible_idx)} visible"
        )
    if encoder.cfg.use_gsd_posenc and not gsd > 0:
        raise ValueError(f"gsd must be positive, got {gsd}")
    idx = torch.as_tensor(plan.visible_idx, dtype=torch.long).unsqueeze(0)
    out = encoder.encode_tokens(seq.tokens.unsqueeze(0), idx, [gsd])
    return TokenSequence(out[0], "visible-only")
