"""Network building blocks: linear layers, point-wise MLPs, batch norm."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform init scaled by 1/sqrt(fan_in), fan_in = first dim."""
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x @ W + b, applied point-wise (3-D inputs are flattened)."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            weight = np.zeros((in_dim, out_dim))
        else:
            weight = fan_in_uniform(rng, (in_dim, out_dim))
        self.weight = store.param(f"{name}.weight", weight)
        self.bias = store.param(f"{name}.bias", np.zeros(out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 3:
            m, k, c = x.shape
            flat = ad.reshape(x, (m * k, c))
            out = ad.add(ad.matmul(flat, self.weight), self.bias)
            return ad.reshape(out, (m, k, self.out_dim))
        return ad.add(ad.matmul(x, self.weight), self.bias)


class MLP:
    """Stack of Linear layers with leaky_relu between them (final layer linear)."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, widths,
                 rng: np.random.Generator, zero_init_last: bool = False,
                 negative_slope: float = 0.2):
        self.layers = []
        self.negative_slope = negative_slope
        prev = in_dim
        for i, width in enumerate(widths):
            last = i == len(widths) - 1
            self.layers.append(
                Linear(store, f"{name}.{i}", prev, width, rng,
                       zero_init=zero_init_last and last)
            )
            prev = width

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.leaky_relu(x, self.negative_slope)
        return x


class BatchNorm:
    """Per-channel batch normalization over the point axis with running stats."""

    def __init__(self, store: ParamStore, name: str, dim: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = store.param(f"{name}.gamma", np.ones(dim))
        self.beta = store.param(f"{name}.beta", np.zeros(dim))
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(dim))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(dim))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, mode=mode,
                             momentum=self.momentum, eps=self.eps)
