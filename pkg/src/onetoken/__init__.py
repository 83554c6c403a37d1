"""Toy-scale vision-language model that feeds the LLM a handful of compressed vision tokens.

Everything runs on a small numpy-backed reverse-mode autodiff core in float64.
"""

from .config import ConfigError, ModelConfig
from .model import MiniInput, MiniModel
from .tensor import Parameter, ShapeError, Tensor

__all__ = ["ConfigError", "MiniInput", "MiniModel", "ModelConfig", "Parameter", "ShapeError", "Tensor"]
__version__ = "0.1.0"
