"""Scale-aware masked autoencoder pretraining for imagery with known ground sample distance."""
from .config import DecoderConfig, EncoderConfig, LossConfig, TrainConfig, load_config, preset
from .estimators import GSDMaskedAutoencoder, KNNProbe
from .eval import FeatureSet, KnnReport, extract_features, knn_classify, multiscale_eval
from .imaging import BandpassTargets, RasterImage, build_targets, make_input, random_scaled_crop, resample
from .model import ScaleAwareMAE, build_model, param_count
from .posenc import PosEncConfig, gsd_2d_sincos, standard_2d_sincos

__version__ = "0.1.0"

__all__ = [
    "BandpassTargets", "DecoderConfig", "EncoderConfig", "FeatureSet", "GSDMaskedAutoencoder",
    "KNNProbe", "KnnReport", "LossConfig", "PosEncConfig", "RasterImage", "ScaleAwareMAE",
    "TrainConfig", "build_model", "build_targets", "extract_features", "gsd_2d_sincos",
    "knn_classify", "load_config", "make_input", "multiscale_eval", "param_count", "preset",
    "random_scaled_crop", "resample", "standard_2d_sincos",
]
