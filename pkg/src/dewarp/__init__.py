"""Document image dewarping toolkit.

From-scratch stack: a numpy autodiff engine, a stacked gated U-Net that
regresses dense backward-mapping grids, a synthetic warp generator with
analytic ground truth, a training loop, unwarping at original resolution,
adaptive post-smoothing, and benchmark-style evaluation metrics.
"""

from .autograd import Tape, Tensor, backward
from .gridsample import DenseGrid, bilinear_sample, identity_grid, unwarp, upsample_grid
from .model import DewarpModel, ModelConfig
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "DenseGrid",
    "bilinear_sample",
    "identity_grid",
    "unwarp",
    "upsample_grid",
    "DewarpModel",
    "ModelConfig",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
