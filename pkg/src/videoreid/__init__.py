"""Video person re-identification with convolutional temporal attention.

A self-contained pipeline: frame preprocessing (YUV + optical flow), a small
convolutional frame encoder, a fully convolutional temporal attention module,
Siamese hinge + identity training, and CMC evaluation, all on a from-scratch
float64 autodiff core. A synthetic two-camera dataset generator makes the
whole thing runnable and testable at desk scale.
"""

from .tensor import (CHECK_FINITE, SgdConfig, ShapeError, Tape, Tensor,
                     backward, effective_lr, grad_check, sgd_step)

__version__ = "0.1.0"

__all__ = [
    "CHECK_FINITE",
    "SgdConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "effective_lr",
    "grad_check",
    "sgd_step",
]
