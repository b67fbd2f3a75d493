"""Conv + batch-norm building blocks shared by the encoder and fusion heads.

A :class:`ConvBlock` bundles one convolution kernel with its batch-norm
parameters and buffers. Parameters carry a *kind* used by the optimizer to
pick per-group treatment:

* ``weight`` -- convolution kernels and other multiplicative weights
  (weight decay applies),
* ``bias``   -- additive per-channel biases (double learning rate, no decay),
* ``bn``     -- batch-norm gamma/beta (no decay).

Initialisation draws from a caller-supplied numpy Generator so a model is a
pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from .ops import batchnorm2d, conv2d, relu
from .tensor import Tensor, default_dtype

NamedParam = Tuple[str, str, Tensor]  # (name, kind, tensor)


@dataclass
class BatchNorm:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    def named_params(self, prefix: str) -> Iterator[NamedParam]:
        yield f"{prefix}.gamma", "bn", self.gamma
        yield f"{prefix}.beta", "bn", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def make_batchnorm(channels: int) -> BatchNorm:
    dt = default_dtype()
    return BatchNorm(
        gamma=Tensor(np.ones(channels, dtype=dt), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dt), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dt),
        running_var=np.ones(channels, dtype=dt),
    )


@dataclass
class ConvBlock:
    """One convolution followed by batch norm (activation is the caller's)."""

    kernel: Tensor
    bn: BatchNorm
    stride: int = 1

    def named_params(self, prefix: str) -> Iterator[NamedParam]:
        yield f"{prefix}.kernel", "weight", self.kernel
        yield from self.bn.named_params(prefix + ".bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(prefix + ".bn")


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Zero-mean normal with variance 2/fan_in, in the current default dtype."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


def make_conv_block(
    rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1
) -> ConvBlock:
    kernel = Tensor(
        he_normal(rng, (c_out, c_in, k, k), fan_in=c_in * k * k), requires_grad=True
    )
    return ConvBlock(kernel=kernel, bn=make_batchnorm(c_out), stride=stride)


def conv_bn(x: Tensor, block: ConvBlock, mode: str) -> Tensor:
    """Convolve (same padding) then batch-normalise, no activation."""
    k = block.kernel.shape[-1]
    y = conv2d(x, block.kernel, stride=block.stride, pad=k // 2)
    return batchnorm2d(
        y, block.bn.gamma, block.bn.beta, block.bn.running_mean, block.bn.running_var, mode
    )


def conv_bn_relu(x: Tensor, block: ConvBlock, mode: str) -> Tensor:
    return relu(conv_bn(x, block, mode))
