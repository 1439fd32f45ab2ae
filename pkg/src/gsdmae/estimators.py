"""scikit-learn style front ends.

``GSDMaskedAutoencoder.fit`` pretrains on images with known gsd and
``transform`` returns frozen, unit-normalized encoder features, so it can
sit in a :class:`sklearn.pipeline.Pipeline` ahead of :class:`KNNProbe`.
Pass images as :class:`~gsdmae.imaging.RasterImage` objects to keep the
gsd attached while they flow through a pipeline.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import config as config_mod
from .eval import SCALES, encode_images, knn_predict, normalize_rows, prepare_eval_image
from .imaging import RasterImage, make_input
from .patching import patchify
from .pipeline import DatasetManifest, Trainer
from .validation import check_features, check_fraction, check_images, check_square


def _center_crop(img: RasterImage, size: int) -> RasterImage:
    top = (img.height - size) // 2
    left = (img.width - size) // 2
    return img.with_pixels(img.pixels[top : top + size, left : left + size])


class GSDMaskedAutoencoder(TransformerMixin, BaseEstimator):
    """Masked autoencoder with GSD positional encodings and a Laplacian decoder.

    Parameters
    ----------
    preset : str
        Base configuration (``"toy"``, ``"vit-base"``, ``"vit-large"``).
    steps, batch_size, learning_rate, mask_ratio, seed :
        Training overrides applied on top of the preset.
    use_gsd_posenc : bool
        Scale positional encodings by gsd (False gives the standard encoding).
    target_mode : {"dual", "low_only", "high_only", "combined"}
    decode_depth : int
        Transformer blocks in the decoder before the convolutional stages.
    scale_pct : float
        Resolution (percent of native) at which ``transform`` encodes images.
    pooling : {"mean", "cls"}
    overrides : list of str, optional
        Extra ``key=value`` config overrides.
    """

    def __init__(self, preset="toy", steps=200, batch_size=8, learning_rate=2e-3, mask_ratio=0.75,
                 use_gsd_posenc=True, target_mode="dual", decode_depth=3, scale_pct=100.0,
                 pooling="mean", seed=0, overrides=None):
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mask_ratio = mask_ratio
        self.use_gsd_posenc = use_gsd_posenc
        self.target_mode = target_mode
        self.decode_depth = decode_depth
        self.scale_pct = scale_pct
        self.pooling = pooling
        self.seed = seed
        self.overrides = overrides

    def _build_config(self):
        check_fraction("mask_ratio", self.mask_ratio)
        cfg = config_mod.preset(self.preset)
        config_mod.apply_overrides(cfg, {
            "steps": self.steps, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "mask_ratio": self.mask_ratio, "seed": self.seed,
            "encoder": {"use_gsd_posenc": self.use_gsd_posenc},
            "decoder": {"decode_depth": self.decode_depth},
            "loss": {"target_mode": self.target_mode},
        })
        config_mod.apply_overrides(cfg, self.overrides or [])
        return cfg.validate()

    def fit(self, X, y=None, gsd=None):
        cfg = self._build_config()
        images = check_images(X, gsd)
        check_square(images, cfg.hr_crop)
        trainer = Trainer(cfg, DatasetManifest.from_images(images))
        self.history_ = trainer.run()
        self.config_ = cfg
        self.model_ = trainer.state.model
        self.n_features_out_ = cfg.encoder.embed_dim
        return self

    def transform(self, X, gsd=None):
        check_is_fitted(self, "model_")
        if self.scale_pct not in SCALES:
            raise ValueError(f"scale_pct must be one of {SCALES}")
        images = check_images(X, gsd)
        size = self.config_.input_size
        prepared = [prepare_eval_image(im, self.scale_pct, size) for im in images]
        return encode_images(self.model_.encoder, prepared, self.pooling)

    def reconstruct(self, X, gsd=None):
        """Low- and high-frequency predictions for unmasked inputs at the crop size."""
        check_is_fitted(self, "model_")
        cfg = self.config_
        images = check_images(X, gsd)
        check_square(images, cfg.hr_crop)
        inputs = [make_input(_center_crop(im, cfg.hr_crop), cfg.input_size) for im in images]
        patches = torch.as_tensor(np.stack([patchify(im, cfg.encoder.patch_size).patches
                                            for im in inputs]), dtype=torch.float32)
        n = patches.shape[1]
        with torch.no_grad():
            low, high = self.model_(patches, torch.arange(n).expand(len(inputs), n),
                                    [im.gsd for im in inputs])
        return low.numpy(), high.numpy()


class KNNProbe(ClassifierMixin, BaseEstimator):
    """Cosine-distance k-nearest-neighbour classifier over frozen features."""

    def __init__(self, k=20):
        self.k = k

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        self.X_ = normalize_rows(X)
        self.y_ = y
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = check_features(X)
        return knn_predict(self.X_, self.y_, X, self.k)
