"""Self-supervised low-dose CT denoising with an invertible coupling network."""

from .metrics import psnr, ssim
from .model import ModelConfig, build_model
from .trainer import TrainConfig, train
from .volume import Volume, make_phantom

__all__ = ["ModelConfig", "TrainConfig", "Volume", "build_model", "make_phantom", "psnr", "ssim", "train"]
__version__ = "0.1.0"
