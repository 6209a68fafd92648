"""Graph-decoder landmark segmentation for chest X-rays, built on a small numpy autodiff engine."""

from .autodiff import ComputationRecord, Tensor, backward
from .model import HybridGNetConfig, build_model
from .training import TrainConfig, train

__all__ = ["ComputationRecord", "HybridGNetConfig", "Tensor", "TrainConfig", "backward", "build_model", "train"]
__version__ = "0.1.0"
