"""Low-light image enhancement with channel-prior and gamma-correction attention blocks."""

from .autodiff import Parameter, Tensor, no_grad, precision
from .losses import LossSpec, psnr, ssim_metric, total_loss
from .model import CPGANetPlus, ModelConfig, count_flops, count_parameters, load_checkpoint, save_checkpoint
from .train import Schedule, Trainer, TrainRun, enhance_array, evaluate

__version__ = "0.1.0"

__all__ = [
    "CPGANetPlus",
    "LossSpec",
    "ModelConfig",
    "Parameter",
    "Schedule",
    "Tensor",
    "TrainRun",
    "Trainer",
    "count_flops",
    "count_parameters",
    "enhance_array",
    "evaluate",
    "load_checkpoint",
    "no_grad",
    "precision",
    "psnr",
    "save_checkpoint",
    "ssim_metric",
    "total_loss",
]
