"""Fully convolutional temporal attention over frame features.

The (N, 128) feature matrix is treated as a 1-channel-per-dimension sequence:
two conv/pool blocks encode it at stride 4, a 1x1 convolution scores it, and a
single learned transposed convolution upsamples back to one raw score per
frame. A sigmoid turns raw scores into per-frame weights in (0, 1). Attention
pooling and plain mean pooling are averaged and L2-normalized into the
video-level descriptor.

Temporal convolutions replicate-pad the sequence ends (a zero feature vector
would be a fake frame); the spatial CNN keeps its zero padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .frame_cnn import CnnParams, forward_video
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    w1: int = 5
    w2: int = 5
    hidden: tuple[int, int] = (64, 32)
    upsample_stride: int = 4
    upsample_kernel: int = 8
    min_length: int = 4
    feature_dim: int = 128
    score_activation: str = "sigmoid"  # "softmax" kept only for the ablation

    def __post_init__(self):
        if self.w1 % 2 == 0 or self.w2 % 2 == 0:
            raise ValueError("window sizes w1 and w2 must be odd")
        if self.upsample_kernel != 2 * self.upsample_stride:
            raise ValueError("upsample kernel must be twice the upsample stride")
        if self.score_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown score activation {self.score_activation!r}")


@dataclass
class AttentionParams:
    conv1_kernel: Tensor
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor
    score_kernel: Tensor
    score_bias: Tensor
    upsample_kernel: Tensor
    config: AttentionConfig

    def parameters(self) -> list[Tensor]:
        return [self.conv1_kernel, self.conv1_bias, self.conv2_kernel, self.conv2_bias,
                self.score_kernel, self.score_bias, self.upsample_kernel]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "att.conv1.kernel": self.conv1_kernel,
            "att.conv1.bias": self.conv1_bias,
            "att.conv2.kernel": self.conv2_kernel,
            "att.conv2.bias": self.conv2_bias,
            "att.score.kernel": self.score_kernel,
            "att.score.bias": self.score_bias,
            "att.upsample.kernel": self.upsample_kernel,
        }


@dataclass
class AttentionVector:
    """Per-frame weights; lambdas is elementwise sigmoid of the raw alphas."""
    lambdas: Tensor
    alphas: Tensor


def triangular_upsample_taps(size: int, stride: int) -> np.ndarray:
    """1-d linear-interpolation filter; tap phases each sum to exactly 1."""
    return 1.0 - np.abs(np.arange(size) + 0.5 - size / 2.0) / stride


def init_attention(seed: int, config: AttentionConfig | None = None) -> AttentionParams:
    """Uniform fan-in init for the convs; the upsample kernel starts as the
    fixed triangular interpolation filter and trains from there."""
    cfg = config or AttentionConfig()
    rng = np.random.default_rng(seed)
    h1, h2 = cfg.hidden

    def uniform(shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    return AttentionParams(
        conv1_kernel=uniform((h1, cfg.feature_dim, cfg.w1), cfg.feature_dim * cfg.w1),
        conv1_bias=Tensor(np.zeros(h1), requires_grad=True),
        conv2_kernel=uniform((h2, h1, cfg.w2), h1 * cfg.w2),
        conv2_bias=Tensor(np.zeros(h2), requires_grad=True),
        score_kernel=uniform((1, h2, 1), h2),
        score_bias=Tensor(np.zeros(1), requires_grad=True),
        upsample_kernel=Tensor(
            triangular_upsample_taps(cfg.upsample_kernel, cfg.upsample_stride).reshape(1, 1, -1),
            requires_grad=True),
        config=cfg,
    )


def zero_attention(config: AttentionConfig | None = None) -> AttentionParams:
    """All-zero parameters (upsample included): raw scores are identically 0."""
    cfg = config or AttentionConfig()
    h1, h2 = cfg.hidden

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return AttentionParams(
        conv1_kernel=zeros((h1, cfg.feature_dim, cfg.w1)),
        conv1_bias=zeros(h1),
        conv2_kernel=zeros((h2, h1, cfg.w2)),
        conv2_bias=zeros(h2),
        score_kernel=zeros((1, h2, 1)),
        score_bias=zeros(1),
        upsample_kernel=zeros((1, 1, cfg.upsample_kernel)),
        config=cfg,
    )


def attention_scores(params: AttentionParams, features: Tensor) -> AttentionVector:
    """Raw and sigmoid attention scores, one per frame of the feature matrix.

    Sequences shorter than min_length are extended by repeating the last row;
    the extra scores are cropped away before the sigmoid.
    """
    cfg = params.config
    if features.data.ndim != 2 or features.data.shape[1] != cfg.feature_dim:
        raise ShapeError(
            f"feature matrix must be (N, {cfg.feature_dim}), got {features.data.shape}")
    n = features.data.shape[0]
    feats = features
    if n < cfg.min_length:
        feats = ops.edge_replicate_rows(feats, cfg.min_length)
    x = ops.transpose2d(feats)
    x = ops.pad_edge_last(x, (cfg.w1 - 1) // 2)
    x = ops.conv1d(x, params.conv1_kernel, params.conv1_bias)
    x = ops.maxpool(ops.tanh(x), 2, 2)
    x = ops.pad_edge_last(x, (cfg.w2 - 1) // 2)
    x = ops.conv1d(x, params.conv2_kernel, params.conv2_bias)
    x = ops.maxpool(ops.tanh(x), 2, 2)
    x = ops.conv1d(x, params.score_kernel, params.score_bias)
    x = ops.transposed_conv1d(x, params.upsample_kernel, cfg.upsample_stride)
    padded_n = max(n, cfg.min_length)
    offset = (x.data.shape[1] - padded_n) // 2
    alphas = ops.flatten(ops.crop_last(x, offset, padded_n))
    if n < padded_n:
        alphas = ops.crop_last(alphas, 0, n)
    if cfg.score_activation == "softmax":
        lambdas = ops.softmax(alphas)
    else:
        lambdas = ops.sigmoid(alphas)
    return AttentionVector(lambdas=lambdas, alphas=alphas)


def attention_pool(features: Tensor, att) -> Tensor:
    """Weighted sum of feature rows: sum_i lambda_i * z_i (no renormalization)."""
    lam = att.lambdas if isinstance(att, AttentionVector) else att
    if lam.data.shape[0] != features.data.shape[0]:
        raise ShapeError(
            f"{lam.data.shape[0]} weights for {features.data.shape[0]} feature rows")
    return ops.matvec(ops.transpose2d(features), lam)


def mean_pool(features: Tensor) -> Tensor:
    """Arithmetic mean of the feature rows."""
    return ops.reduce_mean(features, axis=0)


def descriptor_from_features(params: AttentionParams, features: Tensor) -> Tensor:
    """L2-normalized average of attention pooling and mean pooling."""
    att = attention_scores(params, features)
    pooled = ops.add(attention_pool(features, att), mean_pool(features))
    return ops.l2_normalize(ops.scale(pooled, 0.5))


def video_descriptor(cnn: CnnParams, att: AttentionParams, frames: list[Tensor]) -> Tensor:
    """Video-level descriptor of a preprocessed frame list; unit L2 norm."""
    return descriptor_from_features(att, forward_video(cnn, frames))
