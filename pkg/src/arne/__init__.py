"""Attention relation network for Raven-style matrix reasoning.

Self-contained stack: autodiff tensors, neural layers, the attention
relation model and its relation-network baseline, a desk-scale matrix
generator, the training loop, and an experiment harness exposed through
a job service and CLI.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    GenerationError,
    NumericError,
    ShapeError,
)
from .tensor import Tensor, grad_check, no_grad, precision

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "GenerationError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "grad_check",
    "no_grad",
    "precision",
    "__version__",
]
