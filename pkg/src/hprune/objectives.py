"""Task losses: additive angular margin softmax and binary cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

AAM_MARGIN = 0.2
AAM_SCALE = 32.0
_NORM_FLOOR = 1e-12


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = T.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / T.clamp(norm, _NORM_FLOOR, None)


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def aam_loss(
    embeddings: Tensor,
    labels,
    weight: Tensor,
    margin: float = AAM_MARGIN,
    scale: float = AAM_SCALE,
) -> Tensor:
    """Mean cross-entropy on scaled cosine logits with margin added to the target angle."""
    if not (0.0 <= margin < math.pi / 2):
        raise ValueError("margin must lie in [0, pi/2)")
    if scale <= 0:
        raise ValueError("scale must be positive")
    if embeddings.ndim != 2 or weight.ndim != 2 or embeddings.shape[1] != weight.shape[1]:
        raise T.ShapeError("aam_loss", embeddings.shape, weight.shape)
    onehot = Tensor(_one_hot(labels, weight.shape[0], embeddings.dtype))
    cos = T.matmul(l2_normalize(embeddings), l2_normalize(weight).T)
    sin = T.sqrt(T.clamp(1.0 - cos * cos, 0.0, None))
    cos_m = cos * math.cos(margin) - sin * math.sin(margin)
    logits = (cos + onehot * (cos_m - cos)) * scale
    nll = -(T.log_softmax(logits) * onehot).sum()
    return nll * (1.0 / embeddings.shape[0])


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean log(1 + exp(-y*logit)) with y in {-1, +1}."""
    labels = np.asarray(labels)
    if logits.ndim != 1 or labels.shape != logits.shape:
        raise T.ShapeError("bce_loss", logits.shape, labels.shape)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ValueError("bce labels must be 0 or 1")
    sign = Tensor((2.0 * labels - 1.0).astype(logits.dtype))
    return T.softplus(-(logits * sign)).mean()


@dataclass
class AAMHead:
    weight: Tensor
    margin: float = AAM_MARGIN
    scale: float = AAM_SCALE

    def loss(self, embeddings: Tensor, labels) -> Tensor:
        return aam_loss(embeddings, labels, self.weight, self.margin, self.scale)


@dataclass
class BCEHead:
    weight: Tensor
    bias: Tensor

    def logits(self, embeddings: Tensor) -> Tensor:
        out = T.matmul(embeddings, self.weight) + self.bias
        return out.reshape(embeddings.shape[0])

    def loss(self, embeddings: Tensor, labels) -> Tensor:
        return bce_loss(self.logits(embeddings), labels)
