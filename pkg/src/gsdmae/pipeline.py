"""Dataset manifests, synthetic scenes, the pretraining loop and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .config import TrainConfig
from .imaging import RasterImage, build_targets, load_image, make_input, random_scaled_crop, save_image
from .model import ScaleAwareMAE, build_model, param_count, vanilla_param_count  # noqa: F401
from .objective import LossBreakdown, reconstruction_loss, stack_targets
from .patching import patchify, sample_mask

CHECKPOINT_VERSION = 1
_MAGIC = b"GSDMAECK"
LOG_COLUMNS = ("step", "loss_total", "loss_low", "loss_high")

# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: Path
    gsd: float
    label: int | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    name: str = "dataset"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for e in self.entries:
            if not e.gsd > 0:
                raise ValueError(f"{e.path}: gsd must be positive, got {e.gsd}")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if e.label is None else e.label for e in self.entries])

    def load(self, i: int) -> RasterImage:
        if i not in self._cache:
            e = self.entries[i]
            if not Path(e.path).exists():
                raise FileNotFoundError(f"manifest {self.name!r}: missing image {e.path}")
            self._cache[i] = load_image(e.path, e.gsd)
        return self._cache[i]

    def subset(self, indices, name: str | None = None) -> "DatasetManifest":
        indices = [int(i) for i in indices]
        sub = DatasetManifest([self.entries[i] for i in indices], name or self.name)
        sub._cache.update({j: self._cache[i] for j, i in enumerate(indices) if i in self._cache})
        return sub

    @classmethod
    def from_images(cls, images: list[RasterImage], labels=None, name: str = "in-memory") -> "DatasetManifest":
        """Manifest backed by already-loaded images (no files on disk)."""
        labels = [None] * len(images) if labels is None else [int(v) for v in labels]
        manifest = cls([ManifestEntry(Path(f"<memory:{i}>"), im.gsd, lab)
                        for i, (im, lab) in enumerate(zip(images, labels))], name)
        manifest._cache.update(enumerate(images))
        return manifest


def read_manifest(path, name: str | None = None) -> DatasetManifest:
    """CSV with header ``path,gsd,label``; relative paths resolve against the CSV's folder."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    root = path.parent
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "gsd"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest header lacks {sorted(missing)}")
        for row in reader:
            p = Path(row["path"])
            label = row.get("label")
            entries.append(ManifestEntry(p if p.is_absolute() else root / p, float(row["gsd"]),
                                         int(label) if label not in (None, "") else None))
    return DatasetManifest(entries, name or path.stem)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "gsd", "label"])
        for e in manifest.entries:
            p = Path(e.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([p.as_posix(), repr(e.gsd), "" if e.label is None else e.label])


# ---------------------------------------------------------------------------
# synthetic scenes
#
# Objects have physical sizes in metres, so the pixel footprint of a scene
# depends on its gsd exactly as it would for real imagery.


def _rect_mask(h, w, cy, cx, half_h, half_w, angle):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)


def _smooth_field(rng, h, w, gsd, wavelength_m):
    yy, xx = np.mgrid[0:h, 0:w] * gsd
    out = np.zeros((h, w))
    for _ in range(3):
        k = 2 * math.pi / (wavelength_m * rng.uniform(0.7, 1.5))
        theta = rng.uniform(0, math.pi)
        out += np.sin(k * (xx * math.cos(theta) + yy * math.sin(theta)) + rng.uniform(0, 2 * math.pi))
    return out / 3.0


def render_scene(label: int, size: int, gsd: float, rng: np.random.Generator) -> np.ndarray:
    """One synthetic scene in [0, 1]; pattern family chosen by ``label % 4``."""
    h = w = size
    kind = label % 4
    if kind == 0:  # built-up: many oriented rectangles on pavement
        img = np.full((h, w, 3), 0.45) + 0.05 * _smooth_field(rng, h, w, gsd, 80.0)[..., None]
        n = int(rng.integers(25, 45))
        base_angle = rng.uniform(0, math.pi)
        for _ in range(n):
            half = rng.uniform(4.0, 12.0, size=2) / gsd
            mask = _rect_mask(h, w, rng.uniform(0, h), rng.uniform(0, w), half[0], half[1],
                              base_angle + rng.choice([0.0, math.pi / 2]) + rng.normal(0, 0.05))
            img[mask] = rng.uniform(0.15, 0.95, size=3)
    elif kind == 1:  # vegetation: smooth low-frequency fields
        f = _smooth_field(rng, h, w, gsd, rng.uniform(60.0, 150.0))
        green = np.array([0.25, 0.55, 0.2]) + rng.normal(0, 0.04, size=3)
        img = green + 0.12 * f[..., None] * np.array([0.6, 1.0, 0.5])
    elif kind == 2:  # cropland: parallel stripes
        yy, xx = np.mgrid[0:h, 0:w] * gsd
        theta = rng.uniform(0, math.pi)
        period = rng.uniform(8.0, 20.0)
        stripes = np.sign(np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period))
        img = np.array([0.55, 0.5, 0.3]) + 0.15 * stripes[..., None] * np.array([1.0, 0.8, 0.4])
    else:  # water: dark blue with gentle ripples
        f = _smooth_field(rng, h, w, gsd, rng.uniform(15.0, 40.0))
        img = np.array([0.1, 0.2, 0.4]) + 0.05 * f[..., None]
    img = img + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(n_scenes: int, base_size: int, seed: int, out_dir, *, n_classes: int = 2,
                  gsd_range: tuple[float, float] = (0.3, 1.2), name: str = "synthetic") -> DatasetManifest:
    """Render ``n_scenes`` labelled PNG scenes and write ``manifest.csv`` next to them."""
    if n_scenes < 2:
        raise ValueError("n_scenes must be >= 2")
    if not 1 <= n_classes <= 4:
        raise ValueError("n_classes must be between 1 and 4")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        label = i % n_classes
        gsd = float(rng.uniform(*gsd_range))
        pixels = render_scene(label, base_size, gsd, rng)
        path = out_dir / "images" / f"scene_{i:05d}.png"
        save_image(pixels, path)
        entries.append(ManifestEntry(path, gsd, label))
    manifest = DatasetManifest(entries, name)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# training


def sample_key(seed: int, epoch: int, index: int, stream: int) -> list[int]:
    """Counter-based RNG key: independent of worker layout and call order."""
    return [int(seed), int(epoch), int(index), int(stream)]


_CROP, _MASK, _FLIP, _ORDER = 0, 1, 2, 3


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``learning_rate`` then cosine decay to ``min_lr`` at ``steps``."""
    base = cfg.learning_rate
    if step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.min_lr + (base - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 or name.endswith("token") else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=tuple(cfg.betas))


@dataclass
class PreparedSample:
    patches: np.ndarray
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    input_gsd: float
    targets: object


def prepare_sample(img: RasterImage, cfg: TrainConfig, epoch: int, index: int) -> PreparedSample:
    """Crop, build targets and input, patchify and mask one training image."""
    hr = random_scaled_crop(img, cfg.hr_crop, sample_key(cfg.seed, epoch, index, _CROP))
    if cfg.hflip and np.random.default_rng(sample_key(cfg.seed, epoch, index, _FLIP)).random() < 0.5:
        hr = hr.with_pixels(hr.pixels[:, ::-1].copy())
    targets = build_targets(hr, cfg.input_size, cfg.r_low, cfg.r_high_low)
    inp = make_input(hr, cfg.input_size)
    expected = img.gsd * cfg.hr_crop / cfg.input_size
    if not math.isclose(inp.gsd, expected, rel_tol=1e-12):
        raise AssertionError(f"input gsd {inp.gsd} != manifest gsd x downsample factor {expected}")
    pg = patchify(inp, cfg.encoder.patch_size)
    plan = sample_mask(pg.n_patches, cfg.mask_ratio, sample_key(cfg.seed, epoch, index, _MASK))
    return PreparedSample(pg.patches, plan.visible_idx, plan.masked_idx, inp.gsd, targets)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: ScaleAwareMAE
    optimizer: torch.optim.Optimizer
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        cfg.validate()
        model = build_model(cfg)
        return cls(cfg, model, make_optimizer(model, cfg), 0)


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(n_samples // batch_size, 1)


def batch_for_step(step: int, n_samples: int, cfg: TrainConfig) -> tuple[int, np.ndarray]:
    """(epoch, sample indices) for a global step; each epoch is a fresh seeded permutation."""
    per = steps_per_epoch(n_samples, cfg.batch_size)
    epoch, pos = divmod(step, per)
    order = np.random.default_rng(sample_key(cfg.seed, epoch, 0, _ORDER)).permutation(n_samples)
    bs = min(cfg.batch_size, n_samples)
    return epoch, order[pos * bs : (pos + 1) * bs]


def collate(samples: list[PreparedSample], dtype=torch.float32):
    patches = torch.as_tensor(np.stack([s.patches for s in samples]), dtype=dtype)
    visible = torch.as_tensor(np.stack([s.visible_idx for s in samples]), dtype=torch.long)
    mask = torch.zeros(patches.shape[:2], dtype=torch.bool)
    for i, s in enumerate(samples):
        mask[i, torch.as_tensor(s.masked_idx, dtype=torch.long)] = True
    gsd = np.array([s.input_gsd for s in samples])
    targets = stack_targets([s.targets for s in samples], dtype=dtype)
    return patches, visible, mask, gsd, targets


def compute_loss(model: ScaleAwareMAE, samples: list[PreparedSample], cfg: TrainConfig) -> LossBreakdown:
    dtype = next(model.parameters()).dtype
    patches, visible, mask, gsd, targets = collate(samples, dtype)
    low, high = model(patches, visible, gsd)
    return reconstruction_loss(low, high, targets, cfg.loss, patch_mask=mask,
                               patch_size=cfg.encoder.patch_size)


def train_step(state: TrainState, samples: list[PreparedSample], dump_dir=None) -> dict:
    """One optimizer update on prepared samples; returns the loss breakdown as floats."""
    cfg = state.cfg
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = compute_loss(state.model, samples, cfg)
    if not torch.isfinite(loss.total):
        info = {"step": state.step, "lr": lr, **loss.as_floats(),
                "gsd": [s.input_gsd for s in samples],
                "param_norm": float(sum(p.detach().norm() ** 2 for p in state.model.parameters()) ** 0.5)}
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            (Path(dump_dir) / f"nonfinite_step{state.step}.json").write_text(json.dumps(info, indent=2))
        raise FloatingPointError(f"non-finite loss at step {state.step}: {info}")
    loss.total.backward()
    state.optimizer.step()
    state.step += 1
    return {"step": state.step, **loss.as_floats()}


class Trainer:
    """Drives :func:`train_step` over a manifest with step-indexed, reproducible batches."""

    def __init__(self, cfg: TrainConfig, manifest: DatasetManifest, state: TrainState | None = None,
                 run_dir=None):
        self.cfg = cfg.validate()
        self.manifest = manifest
        self.state = state or TrainState.create(cfg)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.history: list[dict] = []
        small = [i for i, e in enumerate(manifest.entries)
                 if min(manifest.load(i).shape[:2]) < cfg.hr_crop]
        if small:
            raise ValueError(f"{len(small)} images are smaller than hr_crop={cfg.hr_crop} "
                             f"(first: {manifest.entries[small[0]].path})")

    def samples_for_step(self, step: int) -> list[PreparedSample]:
        epoch, idx = batch_for_step(step, len(self.manifest), self.cfg)
        return [prepare_sample(self.manifest.load(int(i)), self.cfg, epoch, int(i)) for i in idx]

    def run(self, until_step: int | None = None, log_path=None, checkpoint_at=()) -> list[dict]:
        until = self.cfg.steps if until_step is None else until_step
        checkpoint_at = set(checkpoint_at)
        if self.cfg.checkpoint_every and self.run_dir is not None:
            checkpoint_at |= set(range(self.cfg.checkpoint_every, until + 1, self.cfg.checkpoint_every))
        writer = _LogWriter(log_path) if log_path else None
        try:
            while self.state.step < until:
                row = train_step(self.state, self.samples_for_step(self.state.step), self.run_dir)
                self.history.append(row)
                if writer and (row["step"] % self.cfg.log_every == 0 or row["step"] == until):
                    writer.write(row)
                if row["step"] in checkpoint_at and self.run_dir is not None:
                    save_checkpoint(self.state, self.run_dir / f"checkpoint_{row['step']:06d}.ckpt")
        finally:
            if writer:
                writer.close()
        return self.history


class _LogWriter:
    def __init__(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        self.fh = path.open("a", newline="")
        self.w = csv.writer(self.fh)
        if new:
            self.w.writerow(LOG_COLUMNS)

    def write(self, row):
        self.w.writerow([row["step"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]])
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"step": int(r["step"]), **{c: float(r[c]) for c in LOG_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing moving average; entry t averages values[max(0, t-window+1) : t+1]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(idx - window + 1, 0)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointRecord:
    step: int
    epoch: int
    model_state: dict
    optimizer_state: dict
    config: dict
    rng_state: dict
    version: int = CHECKPOINT_VERSION


_PARTS = ("model", "optimizer", "config", "rng")


def _serialize(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _deserialize(data: bytes):
    return torch.load(io.BytesIO(data), map_location="cpu", weights_only=False)


def _payload_bytes(record: CheckpointRecord) -> bytes:
    # Each part is pickled on its own: strings shared between parts (state-dict
    # keys vs. wrapper keys) would otherwise change the memo layout after a reload.
    parts = (record.model_state, record.optimizer_state, record.config, record.rng_state)
    blob = {"version": record.version, "step": record.step, "epoch": record.epoch}
    blob.update({name: _serialize(part) for name, part in zip(_PARTS, parts)})
    return _serialize(blob)


def record_from_state(state: TrainState, n_samples: int | None = None) -> CheckpointRecord:
    epoch = state.step // steps_per_epoch(n_samples, state.cfg.batch_size) if n_samples else 0
    return CheckpointRecord(
        step=state.step, epoch=epoch,
        model_state=state.model.state_dict(), optimizer_state=state.optimizer.state_dict(),
        config=config_mod.to_dict(state.cfg),
        rng_state={"seed": state.cfg.seed, "torch": torch.get_rng_state()},
    )


def save_checkpoint(state_or_record, path) -> Path:
    """Atomic write: magic, version, sha256 of payload, payload."""
    record = state_or_record if isinstance(state_or_record, CheckpointRecord) else record_from_state(state_or_record)
    payload = _payload_bytes(record)
    header = _MAGIC + record.version.to_bytes(4, "little") + hashlib.sha256(payload).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> CheckpointRecord:
    data = Path(path).read_bytes()
    head = len(_MAGIC)
    if data[:head] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(data[head : head + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    digest, payload = data[head + 4 : head + 36], data[head + 36 :]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    blob = _deserialize(payload)
    model, optimizer, cfg, rng = (_deserialize(blob[name]) for name in _PARTS)
    return CheckpointRecord(step=blob["step"], epoch=blob["epoch"], model_state=model,
                            optimizer_state=optimizer, config=cfg, rng_state=rng,
                            version=blob["version"])


def state_from_record(record: CheckpointRecord) -> TrainState:
    cfg = config_mod.from_dict(record.config).validate()
    state = TrainState.create(cfg)
    state.model.load_state_dict(record.model_state)
    state.optimizer.load_state_dict(record.optimizer_state)
    state.step = record.step
    torch.set_rng_state(record.rng_state["torch"])
    return state


def resume(path) -> TrainState:
    return state_from_record(load_checkpoint(path))


def pretrain(cfg: TrainConfig, manifest: DatasetManifest, run_dir, resume_from=None) -> TrainState:
    """Full run writing ``train_log.csv``, ``config.yaml`` and ``final.ckpt`` into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, run_dir / "config.yaml")
    state = resume(resume_from) if resume_from else None
    trainer = Trainer(cfg, manifest, state, run_dir)
    trainer.run(log_path=run_dir / "train_log.csv")
    save_checkpoint(record_from_state(trainer.state, len(manifest)), run_dir / "final.ckpt")
    return trainer.state
