"""Conditional GANs for astronomical image colorization and super-resolution."""

from .colorspace import ContractError, ImageGrid, Space, lab_to_rgb, rgb_to_lab
from .metrics import ColorSpace, MetricsReport, evaluate, fid
from .models import ModelKind, ModelParams, ModelSpec, build_model, forward, load_params, save_params
from .objective import LossBreakdown, discriminator_loss, generator_loss
from .trainer import Stage, TrainConfig, TrainState, fine_tune, pretrain

__version__ = "0.1.0"

__all__ = [
    "ColorSpace",
    "ContractError",
    "ImageGrid",
    "LossBreakdown",
    "MetricsReport",
    "ModelKind",
    "ModelParams",
    "ModelSpec",
    "Space",
    "Stage",
    "TrainConfig",
    "TrainState",
    "build_model",
    "discriminator_loss",
    "evaluate",
    "fid",
    "fine_tune",
    "forward",
    "generator_loss",
    "lab_to_rgb",
    "load_params",
    "pretrain",
    "rgb_to_lab",
    "save_params",
]
