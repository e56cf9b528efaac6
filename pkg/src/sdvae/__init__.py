"""Semi-supervised disentangled VAE (SDVAE-I / SDVAE-II, optional IAF) on numpy."""

from .config import TrainingConfig, load_config
from .data import Dataset, SyntheticSpec, load_idx, make_synthetic
from .model import ModelParams, encode, decode, predict, sdvae1_loss, sdvae2_loss, unlabeled_loss
from .trainer import evaluate, split_semisupervised, train

__version__ = "0.1.0"

__all__ = [
    "TrainingConfig",
    "load_config",
    "Dataset",
    "SyntheticSpec",
    "load_idx",
    "make_synthetic",
    "ModelParams",
    "encode",
    "decode",
    "predict",
    "sdvae1_loss",
    "sdvae2_loss",
    "unlabeled_loss",
    "evaluate",
    "split_semisupervised",
    "train",
]
