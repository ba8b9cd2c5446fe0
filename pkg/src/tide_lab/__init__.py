"""Token-identity memory for small transformer language models, built on a
numpy reverse-mode autodiff engine."""

from .model import ModelConfig, TideConfig, TideModel
from .trainer import TrainConfig, Trainer

__all__ = ["ModelConfig", "TideConfig", "TideModel", "TrainConfig", "Trainer"]
__version__ = "0.1.0"
