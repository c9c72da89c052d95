"""Diffusion-LSTM: predict and generate content diffusion trees."""
from .estimator import DiffusionLSTM
from .prototypes import PrototypeKMeans, PrototypeModel, SocialFeaturizer

__all__ = ["DiffusionLSTM", "PrototypeKMeans", "PrototypeModel", "SocialFeaturizer"]
__version__ = "0.1.0"
