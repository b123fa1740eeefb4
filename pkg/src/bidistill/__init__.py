"""Seq2seq training kit: one encoder, twin direction-locked decoders,
mutual distillation between them, and standard left-to-right inference."""

__version__ = "0.1.0"

from .config import Config
from .errors import (ConfigError, ContractError, InputError, NumericError,
                     ShapeError)
from .model import ModelConfig, SBDModel
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = [
    "Config", "ConfigError", "ContractError", "InputError", "NumericError",
    "ShapeError", "ModelConfig", "SBDModel", "Tensor", "backward",
    "grad_check", "no_grad", "__version__",
]
