"""Transformer attention with a gated recurrent cache."""

from .attention import GrcAttentionLayer, inspect_lambda
from .cache import GrcCache, init_cache, slice_channels, token_interpolate
from .model import Model, ModelConfig, build_model
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "GrcAttentionLayer", "GrcCache", "Model", "ModelConfig", "Tape", "Tensor",
    "build_model", "init_cache", "inspect_lambda", "slice_channels", "token_interpolate",
]
