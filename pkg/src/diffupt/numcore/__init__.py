"""Deterministic float64 tensor engine: autodiff, layers, Adam, RNG, weight files."""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add_channel_bias,
    backward,
    concat,
    conv2d,
    embedding,
    matmul,
    no_grad,
    relu,
    sigmoid,
    silu,
    softplus,
    upsample2x,
)
from .rng import RngStream
from .optim import MissingGradError, Parameter, adam_step
from .nn import Conv2d, Embedding, Linear, Module, ModuleList
from .serial import SerializationError, load_state, save_state

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "matmul",
    "conv2d",
    "relu",
    "silu",
    "sigmoid",
    "softplus",
    "concat",
    "embedding",
    "upsample2x",
    "add_channel_bias",
    "RngStream",
    "Parameter",
    "MissingGradError",
    "adam_step",
    "Module",
    "ModuleList",
    "Linear",
    "Conv2d",
    "Embedding",
    "save_state",
    "load_state",
    "SerializationError",
]
