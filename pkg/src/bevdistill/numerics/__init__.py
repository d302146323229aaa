"""Minimal float64 tensor library with reverse-mode autodiff."""

from . import bdt, ops
from .gradcheck import GradCheckResult, check_gradients
from .ops import (
    avgpool2x,
    batchnorm,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
)
from .tensor import DTYPE, GradientTape, Tensor, as_tensor, backward

__all__ = [
    "DTYPE",
    "GradCheckResult",
    "GradientTape",
    "Tensor",
    "as_tensor",
    "avgpool2x",
    "backward",
    "batchnorm",
    "bdt",
    "check_gradients",
    "concat_channels",
    "conv2d",
    "ops",
    "relu",
    "sigmoid",
]
