"""Audio-visual event localization with co-guided attention and background-event contrast."""

from .model import ModelConfig, forward, init_model, predict
from .tensor import Tape, Tensor

__all__ = ["ModelConfig", "Tape", "Tensor", "forward", "init_model", "predict"]
__version__ = "0.1.0"
