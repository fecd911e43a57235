"""Facial action unit detection: triplet-pretrained global encoder, per-AU masks and features, classifier bank."""
from .config import ConfigError, ModelConfig, TrainConfig, desk_model_config, desk_train_config
from .model import AUNet, GlobalExpressionEncoder, mask_apply

__all__ = ["AUNet", "ConfigError", "GlobalExpressionEncoder", "ModelConfig", "TrainConfig",
           "desk_model_config", "desk_train_config", "mask_apply"]
__version__ = "0.1.0"
