"""Segmentation loss: equal blend of pixelwise cross-entropy and soft Dice."""

from __future__ import annotations

import numpy as np

from transnorm.errors import ContractError, DimensionError
from transnorm.tensor import Tensor, log_softmax, softmax
from transnorm.tensor import ops

DICE_SMOOTH = 1.0


def one_hot(target: np.ndarray, num_classes: int) -> np.ndarray:
    """(B, H, W) class ids -> (B, K, H, W) float indicator."""
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ContractError(
            f"target class ids must lie in [0, {num_classes}), got range "
            f"[{target.min()}, {target.max()}]"
        )
    return (target[:, None, :, :] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)


def _check(logits: Tensor, target: np.ndarray) -> np.ndarray:
    if logits.ndim != 4 or np.shape(target) != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"logits {logits.shape} and target {np.shape(target)} disagree")
    return one_hot(target, logits.shape[1])


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixelwise cross-entropy over batch and space."""
    onehot = _check(logits, target)
    b, _, h, w = logits.shape
    picked = ops.sum(ops.mul(log_softmax(logits, axis=1), onehot))
    return ops.mul(picked, -1.0 / (b * h * w))


def soft_dice(logits: Tensor, target: np.ndarray) -> Tensor:
    """Soft multi-class Dice, averaged over classes and batch, with +1 smoothing."""
    onehot = _check(logits, target)
    probs = softmax(logits, axis=1)
    inter = ops.sum(ops.mul(probs, onehot), axis=(2, 3))
    denom = ops.add(ops.sum(probs, axis=(2, 3)), onehot.sum(axis=(2, 3)) + DICE_SMOOTH)
    dice = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), denom)
    return ops.mean(dice)


def segmentation_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """0.5 * cross-entropy + 0.5 * (1 - soft Dice)."""
    ce = cross_entropy(logits, target)
    dice = soft_dice(logits, target)
    return ops.add(ops.mul(ce, 0.5), ops.mul(ops.sub(1.0, dice), 0.5))
