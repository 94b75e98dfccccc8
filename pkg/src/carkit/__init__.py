"""carkit: differentiable content-adaptive image downscaling in numpy."""

from .pipeline import CARModel
from .resampler import ResampleGeometry, downscale_backward, downscale_forward
from .trainer import TrainConfig, Trainer, train

__all__ = ["CARModel", "ResampleGeometry", "TrainConfig", "Trainer", "downscale_backward", "downscale_forward",
           "train"]
__version__ = "0.1.0"
