"""Siamese training objective.

A squared hinge loss on descriptor distance pulls same-identity videos
together and pushes different identities beyond a margin; each branch also
predicts the identity from its normalized descriptor with a shared linear
classifier and softmax cross-entropy. The total is the plain sum of the two
identity terms and the hinge term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import AttentionParams, video_descriptor
from .frame_cnn import CnnParams
from .tensor import Tensor


@dataclass
class IdentityClassifier:
    """Linear identity head over descriptors, shared by both branches."""
    weight: Tensor
    bias: Tensor

    @property
    def num_identities(self) -> int:
        return self.weight.data.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_tensors(self) -> dict[str, Tensor]:
        return {"clf.weight": self.weight, "clf.bias": self.bias}


def init_classifier(seed: int, num_identities: int, feature_dim: int = 128) -> IdentityClassifier:
    if num_identities < 2:
        raise ValueError("classifier needs at least 2 identities")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(1.0 / feature_dim)
    weight = Tensor(rng.uniform(-bound, bound, (num_identities, feature_dim)),
                    requires_grad=True)
    bias = Tensor(np.zeros(num_identities), requires_grad=True)
    return IdentityClassifier(weight, bias)


@dataclass
class LossBreakdown:
    hinge: Tensor
    id1: Tensor
    id2: Tensor
    total: Tensor
    margin: float

    def values(self) -> tuple[float, float, float, float]:
        return (self.hinge.item(), self.id1.item(), self.id2.item(), self.total.item())


def hinge_loss(f1: Tensor, f2: Tensor, same_identity: bool, margin: float) -> Tensor:
    """0.5*d^2 for matching pairs, 0.5*max(0, margin - d)^2 otherwise."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    if same_identity:
        diff = ops.sub(f1, f2)
        return ops.scale(ops.reduce_sum(ops.mul(diff, diff)), 0.5)
    gap = ops.positive_part(
        ops.add_scalar(ops.scale(ops.euclidean_distance(f1, f2), -1.0), margin))
    return ops.scale(ops.mul(gap, gap), 0.5)


def identity_loss(f: Tensor, label: int, clf: IdentityClassifier) -> Tensor:
    """Softmax cross-entropy of the linear identity prediction."""
    k = clf.num_identities
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} identities")
    logits = ops.linear(f, clf.weight, clf.bias)
    return ops.scale(ops.select(ops.log_softmax(logits), label), -1.0)


def combined_loss(pair, cnn: CnnParams, att: AttentionParams,
                  clf: IdentityClassifier, margin: float) -> LossBreakdown:
    """Both branches forward (shared parameters) plus all three loss terms."""
    f1 = video_descriptor(cnn, att, pair.seq1)
    f2 = video_descriptor(cnn, att, pair.seq2)
    hinge = hinge_loss(f1, f2, pair.positive, margin)
    id1 = identity_loss(f1, pair.label1, clf)
    id2 = identity_loss(f2, pair.label2, clf)
    total = ops.add(ops.add(id1, hinge), id2)
    return LossBreakdown(hinge=hinge, id1=id1, id2=id2, total=total, margin=margin)
