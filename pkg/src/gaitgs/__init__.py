"""Gait recognition from silhouette sequences with fine/coarse temporal granularity and local/global span."""
from .model import MODEL_PRESETS, GaitGS, ModelConfig, build_model
from .trainer import TRAIN_PRESETS, TrainConfig, Trainer, train

__all__ = ["GaitGS", "ModelConfig", "MODEL_PRESETS", "build_model", "TrainConfig", "TRAIN_PRESETS", "Trainer", "train"]
__version__ = "0.1.0"
