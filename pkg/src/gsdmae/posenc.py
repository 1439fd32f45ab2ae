"""2-D sine/cosine positional encodings, optionally scaled by ground sample distance.

Layout of one token's D-vector: the first D/2 features encode the column
(x) position and the last D/2 the row (y) position. Within each half,
feature 2i is ``sin(pos * w_i)`` and 2i+1 is ``cos(pos * w_i)`` with
``w_i = temperature ** (-2i / (D/2))``. Tokens are ordered row-major.

With a GSD, each axis position becomes ``pos * gsd / reference_gsd`` so
that the phase tracks ground distance. ``orientation="literal"`` flips
the factor to ``reference_gsd / gsd``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORIENTATIONS = ("ground", "literal")


@dataclass(frozen=True)
class PosEncConfig:
    embed_dim: int
    temperature: float = 10000.0
    reference_gsd: float = 1.0
    orientation: str = "ground"

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % 4:
            raise ValueError(f"embed_dim must be a positive multiple of 4, got {self.embed_dim}")
        if not self.temperature > 1:
            raise ValueError(f"temperature must exceed 1, got {self.temperature}")
        if not self.reference_gsd > 0:
            raise ValueError(f"reference_gsd must be positive, got {self.reference_gsd}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")


@dataclass(frozen=True)
class PositionalGrid:
    values: np.ndarray
    grid_side: int
    gsd_used: float | None

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]


def axis_frequencies(embed_dim: int, temperature: float) -> np.ndarray:
    half = embed_dim // 2
    i = np.arange(half // 2, dtype=np.float64)
    return 1.0 / temperature ** (2.0 * i / half)


def encode_positions(pos: np.ndarray, embed_dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos encoding of 1-D positions: (len(pos), embed_dim // 2)."""
    pos = np.asarray(pos, dtype=np.float64)
    phase = np.outer(pos, axis_frequencies(embed_dim, temperature))
    out = np.empty((pos.shape[0], embed_dim // 2))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def scale_factor(gsd: float, cfg: PosEncConfig) -> float:
    if not gsd > 0:
        raise ValueError(f"gsd must be positive, got {gsd}")
    if cfg.orientation == "ground":
        return gsd / cfg.reference_gsd
    return cfg.reference_gsd / gsd


def _grid(grid_side: int, factor: float, cfg: PosEncConfig) -> np.ndarray:
    if grid_side < 1:
        raise ValueError(f"grid_side must be >= 1, got {grid_side}")
    axis = np.arange(grid_side, dtype=np.float64) * factor
    enc = encode_positions(axis, cfg.embed_dim, cfg.temperature)
    rows, cols = np.meshgrid(np.arange(grid_side), np.arange(grid_side), indexing="ij")
    return np.concatenate([enc[cols.ravel()], enc[rows.ravel()]], axis=1)


def standard_2d_sincos(grid_side: int, cfg: PosEncConfig) -> PositionalGrid:
    return PositionalGrid(_grid(grid_side, 1.0, cfg), grid_side, None)


def gsd_2d_sincos(grid_side: int, gsd: float, cfg: PosEncConfig) -> PositionalGrid:
    return PositionalGrid(_grid(grid_side, scale_factor(gsd, cfg), cfg), grid_side, float(gsd))


def positional_rows(grid_side: int, embed_dim: int, gsd: float | None, *,
                    temperature: float = 10000.0, reference_gsd: float = 1.0,
                    orientation: str = "ground") -> np.ndarray:
    """Convenience wrapper: GSD-scaled table when ``gsd`` is given, else the standard one."""
    cfg = PosEncConfig(embed_dim, temperature, reference_gsd, orientation)
    if gsd is None:
        return standard_2d_sincos(grid_side, cfg).values
    return gsd_2d_sincos(grid_side, gsd, cfg).values
