"""Frozen-encoder features and the multiscale kNN probe."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import Encoder
from .imaging import RasterImage, center_square, resample
from .patching import patchify


SCALES = (12.5, 25.0, 50.0, 100.0)
REPORT_COLUMNS = ("dataset", "scale_pct", "k", "accuracy", "n_train", "n_val", "checkpoint")


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    scale_pct: float
    dataset_name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (N, D) with one label per row")
        norms = np.linalg.norm(self.features, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("feature rows must have unit norm")

    def __len__(self):
        return len(self.labels)

    def save(self, path) -> None:
        np.savez(path, features=self.features, labels=self.labels,
                 scale_pct=self.scale_pct, dataset_name=self.dataset_name)

    @classmethod
    def load(cls, path) -> "FeatureSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["features"], z["labels"], float(z["scale_pct"]), str(z["dataset_name"]))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def prepare_eval_image(img: RasterImage, scale_pct: float, input_size: int) -> RasterImage:
    """Square-crop, shrink to ``scale_pct`` of native size, then resize to the encoder input."""
    img = center_square(img)
    side = int(round(img.height * scale_pct / 100.0))
    small = resample(img, side, side)
    return resample(small, input_size, input_size)


@torch.no_grad()
def encode_images(encoder: Encoder, images: list[RasterImage], pooling: str = "mean",
                  batch_size: int = 32) -> np.ndarray:
    """Unmasked forward pass; mean of patch tokens (or the class token), unit-normalized."""
    encoder.eval()
    p = encoder.cfg.patch_size
    dtype = encoder.patch_embed.weight.dtype
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        patches = torch.as_tensor(np.stack([patchify(im, p).patches for im in chunk]), dtype=dtype)
        n = patches.shape[1]
        idx = torch.arange(n).expand(len(chunk), n)
        latents = encoder(patches, idx, [im.gsd for im in chunk])
        if pooling == "mean":
            feats = encoder.patch_tokens(latents).mean(dim=1)
        elif pooling == "cls":
            if encoder.cls_token is None:
                raise ValueError("cls pooling needs an encoder with a class token")
            feats = latents[:, 0]
        else:
            raise ValueError(f"pooling must be 'mean' or 'cls', got {pooling!r}")
        out.append(feats.double().numpy())
    return normalize_rows(np.concatenate(out))


def extract_features(encoder, manifest, scale_pct: float = 100.0, pooling: str = "mean",
                     batch_size: int = 32) -> FeatureSet | None:
    """Features for every manifest entry at ``scale_pct``; None when the scale is too coarse."""
    encoder = getattr(encoder, "encoder", encoder)
    if scale_pct not in SCALES:
        raise ValueError(f"scale_pct must be one of {SCALES}, got {scale_pct}")
    cfg = encoder.cfg
    images = []
    for i in range(len(manifest)):
        img = manifest.load(i)
        side = int(round(min(img.shape[:2]) * scale_pct / 100.0))
        if side < cfg.patch_size:
            warnings.warn(f"{manifest.name}: {scale_pct}% gives {side}px images, smaller than "
                          f"one {cfg.patch_size}px patch; skipping this scale", stacklevel=2)
            return None
        images.append(prepare_eval_image(img, scale_pct, cfg.input_size))
    feats = encode_images(encoder, images, pooling, batch_size)
    return FeatureSet(feats, manifest.labels, float(scale_pct), manifest.name)


def knn_predict(train_x, train_y, val_x, k: int) -> np.ndarray:
    """Majority vote over the k smallest cosine distances.

    Distance ties keep the lower training index; vote ties go to the lowest class id.
    """
    train_x = normalize_rows(train_x)
    val_x = normalize_rows(val_x)
    train_y = np.asarray(train_y)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("kNN needs non-empty train and validation sets")
    if train_x.shape[1] != val_x.shape[1]:
        raise ValueError(f"feature dims differ: {train_x.shape[1]} vs {val_x.shape[1]}")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k={k} must lie in [1, {len(train_x)}]")
    classes, encoded = np.unique(train_y, return_inverse=True)
    dist = 1.0 - val_x @ train_x.T
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(val_x), len(classes)), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(len(val_x)), k), encoded[nearest].ravel()), 1)
    return classes[votes.argmax(axis=1)]


def knn_classify(train: FeatureSet, val: FeatureSet, k: int) -> float:
    pred = knn_predict(train.features, train.labels, val.features, k)
    return float(np.mean(pred == val.labels))


@dataclass
class KnnReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def accuracy(self, dataset: str, scale_pct: float, k: int) -> float:
        for r in self.rows:
            if r["dataset"] == dataset and r["scale_pct"] == scale_pct and r["k"] == k:
                return r["accuracy"]
        raise KeyError((dataset, scale_pct, k))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r[c] for c in REPORT_COLUMNS})

    @classmethod
    def read_csv(cls, path) -> "KnnReport":
        with Path(path).open(newline="") as fh:
            rows = [{"dataset": r["dataset"], "scale_pct": float(r["scale_pct"]), "k": int(r["k"]),
                     "accuracy": float(r["accuracy"]), "n_train": int(r["n_train"]),
                     "n_val": int(r["n_val"]), "checkpoint": r["checkpoint"]}
                    for r in csv.DictReader(fh)]
        return cls(rows)


def report_from_features(train: FeatureSet, vals: list[FeatureSet], ks, checkpoint: str = "") -> KnnReport:
    rows = []
    for val in vals:
        for k in ks:
            rows.append({"dataset": val.dataset_name, "scale_pct": val.scale_pct, "k": int(k),
                         "accuracy": knn_classify(train, val, int(k)), "n_train": len(train),
                         "n_val": len(val), "checkpoint": checkpoint})
    return KnnReport(rows)


def multiscale_eval(encoder, datasets: dict, ks=(20,), scales=SCALES, checkpoint: str = "",
                    pooling: str = "mean") -> KnnReport:
    """kNN accuracy for every (dataset, scale, k).

    ``datasets`` maps a name to ``(train_manifest, val_manifest)``. Training
    features are taken at full resolution; validation images are shrunk.
    """
    report = KnnReport(metadata={"checkpoint": checkpoint, "pooling": pooling})
    for name, (train_m, val_m) in datasets.items():
        train = extract_features(encoder, train_m, 100.0, pooling)
        train.dataset_name = name
        vals = []
        for s in scales:
            fs = extract_features(encoder, val_m, s, pooling)
            if fs is None:
                continue
            fs.dataset_name = name
            vals.append(fs)
        report.rows.extend(report_from_features(train, vals, ks, checkpoint).rows)
    return report
