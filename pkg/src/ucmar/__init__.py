"""Uncertainty-constrained metal artifact reduction on synthetic CT."""

from .data_sim import (
    DatasetConfig,
    MetalMask,
    PairedSample,
    ScanGeometry,
    Sinogram,
    build_dataset,
    fbp_reconstruct,
    forward_project,
    generate_metal_mask,
    generate_phantom,
    synthesize_pair,
)
from .losses import LossValue, loss_gradient, rmse_loss, uc_loss
from .metrics import MetricReport, evaluate, psnr, ssim
from .model import ArchitectureConfig, CheckpointSet, build_unet, load_checkpoint, restore, save_checkpoint
from .train import TrainConfig, TrainReport, cosine_lr, run_baseline, train_phase1, train_phase2
from .uncertainty import UncertaintyMap, compute_uncertainty, ensemble_infer, uncertainty_profile

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "CheckpointSet",
    "DatasetConfig",
    "LossValue",
    "MetalMask",
    "MetricReport",
    "PairedSample",
    "ScanGeometry",
    "Sinogram",
    "TrainConfig",
    "TrainReport",
    "UncertaintyMap",
    "build_dataset",
    "build_unet",
    "compute_uncertainty",
    "cosine_lr",
    "ensemble_infer",
    "evaluate",
    "fbp_reconstruct",
    "forward_project",
    "generate_metal_mask",
    "generate_phantom",
    "load_checkpoint",
    "loss_gradient",
    "psnr",
    "restore",
    "rmse_loss",
    "run_baseline",
    "save_checkpoint",
    "ssim",
    "synthesize_pair",
    "train_phase1",
    "train_phase2",
    "uc_loss",
    "uncertainty_profile",
]
