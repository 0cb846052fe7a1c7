"""Text-conditioned masked patch-representation pretraining at desk scale."""

from .numerics import Tensor, backward, no_grad
from .trainer import TiJepaConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "TiJepaConfig",
    "backward",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "train",
    "__version__",
]
