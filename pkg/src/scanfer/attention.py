"""Spatio-channel (SCAN) and efficient channel (ECA) attention blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNorm2d,
    ShapeError,
    Tensor,
    conv1d_channels,
    conv2d,
    gap_spatial,
    glorot_uniform,
    prelu,
    sigmoid,
)

SCAN_KERNEL = 3


@dataclass
class ScanBlock:
    """Parameters of one SCAN attention function, shared by every patch and the global pass."""

    conv_weight: Tensor
    conv_bias: Tensor
    prelu_slope: Tensor
    bn: BatchNorm2d

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator) -> "ScanBlock":
        fan = channels * SCAN_KERNEL * SCAN_KERNEL
        return cls(
            conv_weight=glorot_uniform(rng, (channels, channels, SCAN_KERNEL, SCAN_KERNEL), fan, fan),
            conv_bias=Tensor(np.zeros(channels), requires_grad=True),
            prelu_slope=Tensor(np.full(channels, 0.25), requires_grad=True),
            bn=BatchNorm2d.create(channels),
        )

    @property
    def channels(self) -> int:
        return self.conv_weight.shape[0]

    def named_parameters(self):
        yield "conv_weight", self.conv_weight
        yield "conv_bias", self.conv_bias
        yield "prelu_slope", self.prelu_slope
        yield "bn_gamma", self.bn.gamma
        yield "bn_beta", self.bn.beta

    def named_buffers(self):
        yield "bn_running_mean", self.bn.running_mean
        yield "bn_running_var", self.bn.running_var


def scan_forward(block: ScanBlock, inputs: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
    """Return ``(weights, weighted_input)`` for a ``C x H x W`` or ``N x C x H x W`` map.

    weights = sigmoid(BN(PReLU(conv_same(inputs)))), weighted_input = inputs * weights.
    """
    squeeze = inputs.ndim == 3
    x = inputs.reshape((1,) + inputs.shape) if squeeze else inputs
    if x.ndim != 4 or x.shape[1] != block.channels:
        raise ShapeError(f"SCAN over {block.channels} channels cannot take input {inputs.shape}")
    z = conv2d(x, block.conv_weight, block.conv_bias, stride=1, padding="same")
    z = prelu(z, block.prelu_slope)
    z = block.bn(z, training)
    weights = sigmoid(z)
    out = x * weights
    if squeeze:
        return weights.reshape(inputs.shape), out.reshape(inputs.shape)
    return weights, out


def eca_kernel_size(channels: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Adaptive 1-D kernel width: floor(|log2(C)/gamma + b/gamma|), bumped to odd."""
    if channels < 1:
        raise ValueError("channel count must be positive")
    k = int(math.floor(abs(math.log2(channels) / gamma + b / gamma)))
    if k % 2 == 0:
        k += 1
    return max(k, 1)


@dataclass
class EcaBlock:
    kernel: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, k: int | None = None) -> "EcaBlock":
        k = eca_kernel_size(channels) if k is None else k
        if k < 1 or k % 2 == 0:
            raise ValueError(f"ECA kernel size must be a positive odd int, got {k}")
        return cls(kernel=glorot_uniform(rng, (k,), k, k))

    @property
    def k(self) -> int:
        return self.kernel.shape[0]

    def named_parameters(self):
        yield "kernel", self.kernel


def eca_forward(block: EcaBlock, features: Tensor) -> Tensor:
    """Rescale each channel of ``features`` by a sigmoid gate computed from its spatial mean."""
    if features.ndim not in (3, 4):
        raise ShapeError(f"ECA expects C x H x W or N x C x H x W, got {features.shape}")
    descriptor = gap_spatial(features)
    gate = sigmoid(conv1d_channels(descriptor, block.kernel))
    return features * gate.reshape(gate.shape + (1, 1))
