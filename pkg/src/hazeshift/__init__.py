"""Bidirectional residual diffusion between clear and hazy images."""

from .denoiser import DenoiserConfig, DualUNet, NetworkDenoiser
from .diffusion import DEHAZE, HAZIFY, sample_dehaze, sample_hazify
from .haze import gen_dataset, gen_pairs
from .metrics import psnr, ssim
from .schedule import Schedule, build_schedule
from .tiled import build_grid, tiled_sample

__all__ = [
    "DEHAZE",
    "HAZIFY",
    "DenoiserConfig",
    "DualUNet",
    "NetworkDenoiser",
    "Schedule",
    "build_grid",
    "build_schedule",
    "gen_dataset",
    "gen_pairs",
    "psnr",
    "sample_dehaze",
    "sample_hazify",
    "ssim",
    "tiled_sample",
]

__version__ = "0.1.0"
