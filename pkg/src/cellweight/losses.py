"""Weighted Dice loss for the detector and class-weighted cross-entropy.

The loss functions only use elementwise products and sums, so they accept
NumPy arrays (returning floats) or torch tensors (returning differentiable
0-d tensors) alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

DICE_EPSILON = 1e-5
CE_EPSILON = 1e-7


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = DICE_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def _check_shapes(y, r, w):
    if tuple(y.shape) != tuple(r.shape) or tuple(y.shape) != tuple(w.shape):
        raise ValueError(
            f"shape mismatch: Y {tuple(y.shape)}, R {tuple(r.shape)}, W {tuple(w.shape)}"
        )


def weighted_dice_loss(y, r, w, cfg: LossConfig = LossConfig()):
    """1 - 2 (sum W*Y*R + eps) / (sum W*(Y+R) + eps) over a single map."""
    _check_shapes(y, r, w)
    eps = cfg.epsilon
    num = (w * y * r).sum() + eps
    den = (w * (y + r)).sum() + eps
    return 1 - 2 * num / den


def weighted_dice_grad(y: np.ndarray, r: np.ndarray, w: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Closed-form d(loss)/dY for :func:`weighted_dice_loss`."""
    _check_shapes(y, r, w)
    eps = cfg.epsilon
    a = float((w * y * r).sum()) + eps
    b = float((w * (y + r)).sum()) + eps
    return -2.0 * w * (r * b - a) / (b * b)


def weighted_dice_batch(y, r, w, cfg: LossConfig = LossConfig()):
    """Mean per-sample loss over a leading batch axis.

    Every non-batch axis is summed within a sample; inputs may be
    ``(B, H, W)`` or ``(B, H, W, 1)``.
    """
    _check_shapes(y, r, w)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    axes = tuple(range(1, y.ndim))
    eps = cfg.epsilon
    num = (w * y * r).sum(axis=axes) + eps
    den = (w * (y + r)).sum(axis=axes) + eps
    return (1 - 2 * num / den).mean()


def weighted_cross_entropy(
    probs: Sequence[float],
    label: int,
    class_weights: Sequence[float],
    eps: float = CE_EPSILON,
) -> float:
    """-w[label] * log(p[label] + eps) for a single probability vector."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a probability simplex: {p}")
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-class_weights[label] * np.log(p[label] + eps))


def weighted_cross_entropy_batch(probs, labels, class_weights, eps: float = CE_EPSILON):
    """Torch version for training: mean of per-sample weighted losses.

    ``probs`` is (B, n_classes), ``labels`` (B,) int64, ``class_weights``
    (n_classes,) tensor.
    """
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return (-class_weights[labels] * torch.log(picked + eps)).mean()
