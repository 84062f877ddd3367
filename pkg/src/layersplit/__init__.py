"""Label-free single-image reflection removal.

A one-branch convolutional network separates an image into background and
reflection layers; the output layer is chosen by a learnable latent code.
Training needs only image groups that share a background.
"""

__version__ = "0.1.0"

from ._validation import (  # noqa: E402
    CheckpointError,
    ConfigError,
    CorpusError,
    LayersplitError,
    OwnershipError,
    ShapeError,
    TrainingDiverged,
    UndefinedAlphaError,
)
from .losses import LossWeights, PredictionSet, total_loss  # noqa: E402
from .model import NetConfig, build_network, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "CheckpointError",
    "ConfigError",
    "CorpusError",
    "LayersplitError",
    "LossWeights",
    "NetConfig",
    "OwnershipError",
    "PredictionSet",
    "ShapeError",
    "TrainingDiverged",
    "UndefinedAlphaError",
    "build_network",
    "load_checkpoint",
    "save_checkpoint",
    "total_loss",
]
