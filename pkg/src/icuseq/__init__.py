"""Self-supervised sequence models for irregular clinical event streams."""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .config import ExperimentConfig, load_config, save_config
from .data import StayRecord, Vocabulary, parse_stay_file, serialize_stay
from .model import SequenceModel, load_model_checkpoint, save_model_checkpoint

__all__ = [
    "__version__",
    "Tensor",
    "no_grad",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "StayRecord",
    "Vocabulary",
    "parse_stay_file",
    "serialize_stay",
    "SequenceModel",
    "load_model_checkpoint",
    "save_model_checkpoint",
]
