"""RA V-Net liver segmentation on a small numpy autodiff engine."""

from .arch import NetworkConfig, RAVNet, ravnet_forward
from .data import Manifest, SliceSample, WindowSpec, hu_window, load_manifest, synth_samples
from .errors import (
    ConfigError,
    DeterminismError,
    DivergenceError,
    DomainError,
    EmptyInputError,
    FormatError,
    IoError,
    RavNetError,
    ShapeError,
    StateError,
    TapeError,
)
from .gradcheck import gradcheck
from .losses import bce_loss, dice_loss, evaluate_pair
from .tensor import Tape, Tensor, backward, no_grad
from .trainer import Checkpoint, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DeterminismError",
    "DivergenceError",
    "DomainError",
    "EmptyInputError",
    "FormatError",
    "IoError",
    "Manifest",
    "NetworkConfig",
    "RAVNet",
    "RavNetError",
    "ShapeError",
    "SliceSample",
    "StateError",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "WindowSpec",
    "backward",
    "bce_loss",
    "dice_loss",
    "evaluate",
    "evaluate_pair",
    "fit",
    "gradcheck",
    "hu_window",
    "load_checkpoint",
    "load_manifest",
    "no_grad",
    "ravnet_forward",
    "save_checkpoint",
    "synth_samples",
    "train",
]
