"""Part-based person re-identification head with relational local features
and global contrastive pooling, plus training and retrieval evaluation."""

from .config import DecaySchedule, RunConfig, TrainConfig, load_config
from .errors import ConfigError, FormatError, ManifestError
from .head import HeadConfig, HeadParams, multiscale_forward, representation_dim
from .objectives import ClassifierBank, batch_hard_triplet, combined_loss, cross_entropy_loss
from .tensor import BatchNormState, ShapeError, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "BatchNormState", "ClassifierBank", "ConfigError", "DecaySchedule", "FormatError",
    "HeadConfig", "HeadParams", "ManifestError", "RunConfig", "ShapeError", "Tensor",
    "TrainConfig", "batch_hard_triplet", "combined_loss", "cross_entropy_loss",
    "grad_check", "load_config", "multiscale_forward", "representation_dim",
]
