"""Stereo JPEG deblocking with a bi-directional parallax transformer.

The package bundles a minimal tape-based autodiff engine, the symmetric
cross-view restoration network built on it, a deterministic JPEG luminance
degradation codec, the PSNR / SSIM / PSNR-B evaluation triple, and a
synthetic stereo data harness.
"""

from . import autodiff, blocks, data, fusion, jpegcodec, metrics, model, parallax, tensorio, training
from .autodiff import Tape, Tensor, grad_check
from .data import StereoSample, SynthSpec, synth_stereo
from .jpegcodec import degrade, luma_quant_table
from .metrics import QualityReport, evaluate_pair, psnr, psnr_b, ssim
from .model import DeblockNet, NetConfig, load_checkpoint, loss_l1, save_checkpoint
from .parallax import biptm_forward
from .training import Adam, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "autodiff", "blocks", "data", "fusion", "jpegcodec", "metrics", "model",
    "parallax", "tensorio", "training",
    "Tape", "Tensor", "grad_check", "StereoSample", "SynthSpec", "synth_stereo",
    "degrade", "luma_quant_table", "QualityReport", "evaluate_pair", "psnr",
    "psnr_b", "ssim", "DeblockNet", "NetConfig", "load_checkpoint", "loss_l1",
    "save_checkpoint", "biptm_forward", "Adam", "TrainConfig", "train",
]
