"""Structure-aware vision transformer on a self-contained autodiff core."""

from .autodiff import Tensor, no_grad
from .backbone import PatchGrid, split_patches
from .model import Architecture, StructViT
from .synthdata import generate
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "PatchGrid",
    "StructViT",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "generate",
    "no_grad",
    "split_patches",
    "train",
    "__version__",
]
