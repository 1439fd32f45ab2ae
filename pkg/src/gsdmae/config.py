"""Run configuration: nested dataclasses, named presets, YAML files and key=value overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

TARGET_MODES = ("dual", "low_only", "high_only", "combined")


@dataclass
class EncoderConfig:
    input_size: int = 64
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_gsd_posenc: bool = True
    use_class_token: bool = True
    reference_gsd: float = 1.0
    gsd_factor_orientation: str = "ground"
    norm_mean: float = 0.5
    norm_std: float = 0.5

    def validate(self):
        if self.input_size % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} must divide input_size {self.input_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 4:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by 4")
        if self.depth < 0:
            raise ValueError("encoder depth must be >= 0")

    @property
    def grid_side(self) -> int:
        return self.input_size // self.patch_size


@dataclass
class DecoderConfig:
    decode_dim: int = 64
    decode_depth: int = 3
    num_heads: int = 4
    mlp_ratio: float = 4.0
    lb_dim: int = 0  # 0 -> decode_dim
    feature_map_blocks_per_lb: int = 2
    low_out_size: int = 64
    high_out_size: int = 128
    use_gsd_posenc: bool | None = None  # None -> follow the encoder flag

    def validate(self):
        if self.decode_dim % self.num_heads or self.decode_dim % 4:
            raise ValueError(f"decode_dim {self.decode_dim} must be divisible by num_heads and 4")
        if self.decode_depth < 0:
            raise ValueError("decode_depth must be >= 0")

    @property
    def lb_channels(self) -> int:
        return self.lb_dim or self.decode_dim


@dataclass
class LossConfig:
    low_weight: float = 1.0
    high_weight: float = 1.0
    target_mode: str = "dual"
    masked_only_low: bool = False

    def validate(self):
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.low_weight < 0 or self.high_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.low_weight == 0 and self.high_weight == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class TrainConfig:
    hr_crop: int = 128
    input_size: int = 64
    r_low: int = 4
    r_high_low: int = 16
    mask_ratio: float = 0.75
    steps: int = 200
    epochs: int = 0  # informational; training length is driven by `steps`
    batch_size: int = 8
    learning_rate: float = 2e-3
    min_lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_steps: int = 10
    betas: tuple = (0.9, 0.95)
    hflip: bool = False
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        self.encoder.validate()
        self.decoder.validate()
        self.loss.validate()
        if not self.r_low < self.input_size < self.hr_crop:
            raise ValueError(
                f"size chain must satisfy r_low < input_size < hr_crop, got "
                f"{self.r_low}, {self.input_size}, {self.hr_crop}"
            )
        if not self.r_high_low < self.hr_crop:
            raise ValueError("r_high_low must be below hr_crop")
        if self.encoder.input_size != self.input_size:
            raise ValueError(
                f"encoder.input_size {self.encoder.input_size} != input_size {self.input_size}"
            )
        if self.decoder.low_out_size != self.input_size or self.decoder.high_out_size != self.hr_crop:
            raise ValueError("decoder output sizes must equal (input_size, hr_crop)")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        return self


def _toy() -> TrainConfig:
    return TrainConfig()


def _vit(embed_dim, depth, heads, decode_dim=512, decode_heads=16) -> TrainConfig:
    return TrainConfig(
        hr_crop=448, input_size=224, r_low=14, r_high_low=56,
        batch_size=64, learning_rate=1.5e-4, min_lr=0.0, warmup_steps=1000, steps=100000,
        encoder=EncoderConfig(input_size=224, patch_size=16, embed_dim=embed_dim,
                              depth=depth, num_heads=heads),
        decoder=DecoderConfig(decode_dim=decode_dim, decode_depth=3, num_heads=decode_heads,
                              low_out_size=224, high_out_size=448),
    )


PRESETS = {
    "toy": _toy,
    "vit-base": lambda: _vit(768, 12, 12),
    "vit-large": lambda: _vit(1024, 24, 16),
}


def preset(name: str) -> TrainConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(value, current):
    if isinstance(current, bool) or current is None and isinstance(value, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            if low in ("none", "null") and current is None:
                return None
            raise ValueError(f"expected a boolean, got {value!r}")
        return value if value is None else bool(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [float(v) for v in value.strip("()[]").split(",")]
        return tuple(value)
    if current is None and isinstance(value, str):
        low = value.strip().lower()
        if low in ("none", "null"):
            return None
        if low in ("true", "false"):
            return low == "true"
    return value


def override_keys(cfg=None, prefix: str = "") -> list[str]:
    """Every dotted key that may be set with ``key=value``, derived from the dataclasses."""
    cfg = cfg if cfg is not None else TrainConfig()
    keys = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            keys.extend(override_keys(value, prefix + f.name + "."))
        else:
            keys.append(prefix + f.name)
    return keys


def set_key(cfg, key: str, value) -> None:
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise KeyError(key)
        target = getattr(target, part)
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(target)} if dataclasses.is_dataclass(target) else set()
    if leaf not in names or dataclasses.is_dataclass(getattr(target, leaf)):
        raise KeyError(key)
    setattr(target, leaf, _coerce(value, getattr(target, leaf)))


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``key=value`` strings (or a nested dict) to ``cfg`` in place."""
    if isinstance(overrides, dict):
        overrides = [f"{k}={v}" for k, v in _flatten(overrides)]
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value if not isinstance(value, str) else value.strip())
    return cfg


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, prefix + k + ".")
        else:
            yield prefix + k, v


def from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    for key, value in _flatten(data):
        set_key(cfg, key, value)
    return cfg


def load_config(path_or_preset: str | None, overrides=()) -> TrainConfig:
    """Resolve a preset name or YAML path, then apply overrides.

    A YAML file may name a ``preset`` at top level to start from.
    """
    if path_or_preset is None:
        cfg = preset("toy")
    elif path_or_preset in PRESETS:
        cfg = preset(path_or_preset)
    else:
        path = Path(path_or_preset)
        if not path.exists():
            raise FileNotFoundError(f"config {path} not found (presets: {sorted(PRESETS)})")
        data = yaml.safe_load(path.read_text()) or {}
        base = preset(data.pop("preset", "toy"))
        cfg = from_dict(data, base)
    apply_overrides(cfg, overrides)
    return cfg.validate()


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
