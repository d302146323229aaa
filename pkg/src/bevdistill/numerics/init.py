from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, name: str = "") -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def conv_params(rng: np.random.Generator, c_out: int, c_in: int, k: int, prefix: str):
    fan_in = c_in * k * k
    w = uniform_fan_in(rng, (c_out, c_in, k, k), fan_in, name=f"{prefix}.weight")
    b = uniform_fan_in(rng, (c_out,), fan_in, name=f"{prefix}.bias")
    return w, b
