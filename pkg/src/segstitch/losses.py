"""Negated soft Dice over foreground classes."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[B, ...] integer labels -> [B, K, ...] indicator volume."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def soft_dice_loss(logits: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """-(1/K') sum_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps), p = softmax over classes.

    Sums run over batch and voxels together; background (class 0) is excluded.
    """
    k = logits.shape[1]
    if k < 2:
        raise ConfigurationError(f"soft Dice needs at least 2 classes, got {k}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigurationError(f"labels span [{labels.min()}, {labels.max()}] but logits have {k} classes")
    g = one_hot(labels, k, logits.dtype)
    axes = (0,) + tuple(range(2, logits.ndim))
    p = T.softmax(logits, axis=1)
    inter = T.sum(T.mul(p, g), axes)
    denom = T.add(T.sum(p, axes), g.sum(axis=axes) + eps)
    dice = T.div(T.add(T.scale(inter, 2.0), eps), denom)
    return T.neg(T.mean(T.getitem(dice, slice(1, None))))
