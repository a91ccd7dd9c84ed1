"""Three-stage convolutional frame encoder producing 128-d features.

Each stage is conv (5x5 kernel, stride 1, zero padding 4) -> tanh -> 2x2 max
pool; a final flatten + affine + tanh maps to the feature vector. Applied
framewise, a video becomes an (N, 128) feature matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

CHANNEL_PLAN = (5, 16, 32, 32)
KERNEL = 5
PADDING = (4, 4)
POOL = (2, 2)
FEATURE_DIM = 128


def stage_output_hw(input_hw: tuple[int, int], stages: int) -> tuple[int, int]:
    """Spatial extent after ``stages`` conv(pad 4, k 5, stride 1) + pool(2) blocks."""
    h, w = input_hw
    for _ in range(stages):
        h = (h + 2 * PADDING[0] - KERNEL) + 1
        w = (w + 2 * PADDING[1] - KERNEL) + 1
        h //= 2
        w //= 2
    return h, w


def flat_dim(channel_plan: tuple[int, ...], input_hw: tuple[int, int]) -> int:
    h, w = stage_output_hw(input_hw, len(channel_plan) - 1)
    return channel_plan[-1] * h * w


@dataclass
class CnnParams:
    kernels: list[Tensor]
    biases: list[Tensor]
    fc_weight: Tensor
    fc_bias: Tensor
    channel_plan: tuple[int, ...]
    input_hw: tuple[int, int]

    def parameters(self) -> list[Tensor]:
        return [*self.kernels, *self.biases, self.fc_weight, self.fc_bias]

    def named_tensors(self) -> dict[str, Tensor]:
        named = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            named[f"cnn.stage{i}.kernel"] = k
            named[f"cnn.stage{i}.bias"] = b
        named["cnn.fc.weight"] = self.fc_weight
        named["cnn.fc.bias"] = self.fc_bias
        return named


def init_cnn(seed: int, channel_plan: tuple[int, ...] = CHANNEL_PLAN,
             input_hw: tuple[int, int] = (56, 40),
             feature_dim: int = FEATURE_DIM) -> CnnParams:
    """Seed-deterministic init: weights ~ U(-b, b) with b = sqrt(1/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for i in range(len(channel_plan) - 1):
        c_in, c_out = channel_plan[i], channel_plan[i + 1]
        bound = math.sqrt(1.0 / (c_in * KERNEL * KERNEL))
        kernels.append(Tensor(rng.uniform(-bound, bound, (c_out, c_in, KERNEL, KERNEL)),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(c_out), requires_grad=True))
    flat = flat_dim(channel_plan, input_hw)
    bound = math.sqrt(1.0 / flat)
    fc_weight = Tensor(rng.uniform(-bound, bound, (feature_dim, flat)), requires_grad=True)
    fc_bias = Tensor(np.zeros(feature_dim), requires_grad=True)
    return CnnParams(kernels, biases, fc_weight, fc_bias, tuple(channel_plan), tuple(input_hw))


def forward_frame(params: CnnParams, frame: Tensor) -> Tensor:
    """Encode one (C, H, W) frame into a feature vector in (-1, 1)^d."""
    expected = (params.channel_plan[0], *params.input_hw)
    if frame.data.shape != expected:
        raise ShapeError(f"frame shape {frame.data.shape}, expected {expected}")
    x = frame
    for kernel, bias in zip(params.kernels, params.biases):
        x = ops.conv2d(x, kernel, bias, stride=(1, 1), padding=PADDING)
        x = ops.tanh(x)
        x = ops.maxpool(x, POOL, POOL)
    x = ops.linear(ops.flatten(x), params.fc_weight, params.fc_bias)
    return ops.tanh(x)


def forward_video(params: CnnParams, frames: list[Tensor]) -> Tensor:
    """Stack per-frame features into an (N, d) matrix; rows are independent."""
    if not frames:
        raise ShapeError("forward_video: empty frame list")
    return ops.stack_rows([forward_frame(params, f) for f in frames])
