"""
Weighted KL-Divergence Loss

KL(target || prediction) per pixel, weighted per class and per pixel,
averaged over the pixels that carry a target. Returns the gradient with
respect to the pre-softmax activations alongside the value.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy.special import xlogy

from config import KL_EPSILON
from modules.errors import InvalidInputError
from modules.taxonomy import UNLABELLED

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-4


@dataclass(frozen=True)
class ClassWeights:
    """Per-group loss weights, w_g = 1 - p_g."""
    group_ids: Tuple[int, ...]
    weights: np.ndarray

    def as_dict(self) -> Dict[int, float]:
        return {g: float(w) for g, w in zip(self.group_ids, self.weights)}

    def scaled(self, factor: float) -> "ClassWeights":
        return ClassWeights(self.group_ids, self.weights * factor)


def _complement_weights(group_ids, frequencies: np.ndarray, counts: np.ndarray) -> ClassWeights:
    weights = 1.0 - frequencies
    missing = [g for g, c in zip(group_ids, counts) if c == 0]
    if missing:
        message = f"Groups {missing} have no labelled pixels; their weight is set to 1"
        logger.warning(message)
        warnings.warn(message, RuntimeWarning, stacklevel=3)
        weights = np.where(counts == 0, 1.0, weights)
    dominant = [g for g, w in zip(group_ids, weights) if w <= 0.0]
    if dominant:
        message = f"Groups {dominant} cover every labelled pixel; their weight is 0"
        logger.warning(message)
        warnings.warn(message, RuntimeWarning, stacklevel=3)
    return ClassWeights(tuple(group_ids), weights)


def compute_class_weights(
    train_masks: Sequence[np.ndarray],
    group_ids: Sequence[int] = (0, 1, 2, 3, 4)
) -> ClassWeights:
    """
    Complement-of-frequency weights from group label arrays.

    Args:
        train_masks: Group label arrays; -1 pixels are ignored
        group_ids: Groups to weight

    Returns:
        ClassWeights with w_g = 1 - count_g / labelled pixels

    Raises:
        InvalidInputError: If no pixel is labelled
    """
    counts = np.zeros(len(group_ids), dtype=np.int64)
    for mask in train_masks:
        mask = np.asarray(mask)
        for i, g in enumerate(group_ids):
            counts[i] += int((mask == g).sum())

    total = int(counts.sum())
    if total == 0:
        raise InvalidInputError("No labelled pixels to compute class weights from")
    return _complement_weights(group_ids, counts / total, counts)


def class_weights_from_soft(
    targets: np.ndarray,
    supported: np.ndarray,
    group_ids: Sequence[int] = (0, 1, 2, 3, 4)
) -> ClassWeights:
    """Complement weights from soft-label mass over the supported pixels."""
    n = int(supported.sum())
    if n == 0:
        raise InvalidInputError("No supported pixels to compute class weights from")
    mass = np.stack([targets[:, i][supported].sum() for i in range(len(group_ids))])
    return _complement_weights(group_ids, mass / n, mass)


def class_weights_from_prevalences(prevalences: Dict[int, float]) -> ClassWeights:
    """Complement weights from known group prevalences."""
    group_ids = tuple(sorted(g for g in prevalences if g != UNLABELLED))
    frequencies = np.array([prevalences[g] for g in group_ids])
    return _complement_weights(group_ids, frequencies, np.where(frequencies > 0, 1, 0))


def _check_normalized(probs: np.ndarray, where: np.ndarray, name: str) -> None:
    sums = probs.sum(axis=1)
    bad = where & (np.abs(sums - 1.0) > NORMALIZATION_TOLERANCE)
    if bad.any():
        worst = float(np.max(np.abs(sums - 1.0)[bad]))
        raise InvalidInputError(f"{name} distribution not normalized (deviation {worst:.3g})")


def kl_loss(
    pred: np.ndarray,
    target: np.ndarray,
    weights: ClassWeights = None,
    pixel_weights: np.ndarray = None,
    epsilon: float = None,
    supported: np.ndarray = None
) -> Tuple[float, np.ndarray]:
    """
    Weighted KL(target || pred) and its gradient on the logits.

    loss = mean over supported x of
           pixel_weight(x) * sum_c w_c t_c(x) log(t_c(x) / (p_c(x) + eps))

    Args:
        pred: (N, C, H, W) softmax output
        target: (N, C, H, W) target distribution (all zero where unsupported)
        weights: Per-class weights; defaults to ones
        pixel_weights: (N, H, W) per-pixel weights; defaults to ones
        epsilon: Added to pred inside the log
        supported: (N, H, W) mask of pixels with a target; defaults to
            pixels whose target has mass

    Returns:
        (loss, gradient w.r.t. pre-softmax activations)

    Raises:
        InvalidInputError: Shape mismatch, epsilon <= 0 or unnormalized inputs
    """
    epsilon = KL_EPSILON if epsilon is None else epsilon
    if not epsilon > 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 4:
        raise InvalidInputError(f"Prediction shape {pred.shape} != target shape {target.shape}")

    n, c, h, w = pred.shape
    if supported is None:
        supported = target.sum(axis=1) > 0.5
    if pixel_weights is None:
        pixel_weights = np.ones((n, h, w))
    class_w = np.ones(c) if weights is None else np.asarray(weights.weights, dtype=np.float64)
    if class_w.shape != (c,):
        raise InvalidInputError(f"Expected {c} class weights, got {class_w.shape}")

    _check_normalized(pred, np.ones((n, h, w), dtype=bool), "Predicted")
    _check_normalized(target, supported, "Target")

    n_supported = int(supported.sum())
    if n_supported == 0:
        return 0.0, np.zeros_like(pred)

    pw = np.where(supported, pixel_weights, 0.0)[:, np.newaxis]
    cw = class_w[np.newaxis, :, np.newaxis, np.newaxis]
    q = pred + epsilon

    # xlogy gives 0 * log(0) = 0 for absent target classes
    per_class = cw * (xlogy(target, target) - xlogy(target, q))
    loss = float((pw * per_class).sum() / n_supported)

    # dL/dp_c = -pw w_c t_c / (p_c + eps); chain through the softmax
    dp = -pw * cw * target / q / n_supported
    grad = pred * (dp - (dp * pred).sum(axis=1, keepdims=True))
    return loss, grad
