"""Desk-scale unsupervised domain adaptation: adversarial conditioning, information
maximization, class-confusion, MMD and pseudo-label MMD losses on a small
tape-based autodiff engine."""

from .autograd import Tensor, backward, grad_check, no_grad
from .data import Dataset, ShiftSpec, generate_shift_pair, load_csv, save_csv
from .errors import (CheckpointError, ConfigError, DataFormatError, IdalError, NumericError,
                     ShapeError)
from .losses import KernelSpec, LossWeights
from .trainer import PRESETS, TrainConfig, Trainer

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "Dataset", "ShiftSpec", "generate_shift_pair", "load_csv", "save_csv",
    "CheckpointError", "ConfigError", "DataFormatError", "IdalError", "NumericError", "ShapeError",
    "KernelSpec", "LossWeights", "PRESETS", "TrainConfig", "Trainer",
]

__version__ = "0.1.0"
