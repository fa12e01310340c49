"""From-scratch 3D U-Net: layers, model, SGD and checkpoints."""

from .optim import TrainState, load_checkpoint, save_checkpoint, sgd_step
from .unet import (
    DESK_SPEC,
    FULL_SPEC,
    ParameterSet,
    UNet,
    UNetSpec,
    parameter_count,
    shape_arithmetic,
)

__all__ = [
    "DESK_SPEC",
    "FULL_SPEC",
    "ParameterSet",
    "TrainState",
    "UNet",
    "UNetSpec",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
    "sgd_step",
    "shape_arithmetic",
]
