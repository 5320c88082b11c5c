"""JPEG artifact removal with two-stage residual-in-residual dense networks on a numpy autodiff core."""

from .imaging import ColorSpace, Image, load_image, save_image
from .jpeg_sim import degrade, tables_for
from .metrics import ChannelMode, evaluate_pair, psnr, psnr_b, ssim
from .rrdb_model import NetworkSpec, build, load_weights, restore, save_weights

__all__ = [
    "ColorSpace", "Image", "load_image", "save_image",
    "degrade", "tables_for",
    "ChannelMode", "evaluate_pair", "psnr", "psnr_b", "ssim",
    "NetworkSpec", "build", "load_weights", "restore", "save_weights",
]
__version__ = "0.1.0"
