"""
Segmentation Metrics Module

Streaming confusion counts and the metrics computed from them: per-class
IOU, binary opacity IOU, Relative Volume, percent well-aerated lung and
inter-observer agreement.

All counts are integers, so accumulators can be filled in any order or in
parallel and merged without changing a result.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from config import LUNG_GROUP, OPACITY_GROUPS
from modules.errors import InvalidInputError
from modules.label_fusion import average_annotation
from modules.taxonomy import ClassTaxonomy, UNLABELLED
from modules.volume import LabelMask, check_same_geometry, class_to_group

logger = logging.getLogger(__name__)

# Returned for an IOU whose union is empty; excluded from means
UNDEFINED = float("nan")

BINARY_CLASSES = (0, 1)


class ConfusionAccumulator:
    """
    Per-class TP/FP/FN/TN counts over a fixed class list.

    Pixels whose ground truth is Unlabelled (-1) are skipped for every
    class, so tp + fp + fn + tn is the same for all classes.
    """

    def __init__(self, classes: Sequence[int]):
        """
        Initialize an empty accumulator.

        Args:
            classes: Class (or group) IDs that predictions and labels use
        """
        classes = tuple(int(c) for c in classes)
        if not classes or len(set(classes)) != len(classes) or UNLABELLED in classes:
            raise InvalidInputError(f"Invalid accumulator classes: {classes}")
        self.classes = classes
        n = len(classes)
        self.confusion = np.zeros((n, n), dtype=np.int64)

        self._lut_offset = min(classes)
        lut = np.full(max(classes) - self._lut_offset + 1, -1, dtype=np.int64)
        lut[np.asarray(classes) - self._lut_offset] = np.arange(n)
        self._lut = lut

    def _index(self, labels: np.ndarray, what: str) -> np.ndarray:
        shifted = labels.astype(np.int64) - self._lut_offset
        inside = (shifted >= 0) & (shifted < len(self._lut))
        idx = np.full(labels.shape, -1, dtype=np.int64)
        idx[inside] = self._lut[shifted[inside]]
        if (idx < 0).any():
            bad = labels[idx < 0].flat[0]
            raise InvalidInputError(f"{what} value {int(bad)} is not one of classes {self.classes}")
        return idx

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionAccumulator":
        """
        Add one prediction / ground-truth pair.

        Args:
            pred: Predicted labels
            gt: Ground-truth labels; -1 marks pixels to skip

        Returns:
            self, for chaining
        """
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise InvalidInputError(f"Prediction shape {pred.shape} != ground truth shape {gt.shape}")

        keep = gt != UNLABELLED
        g = self._index(gt[keep], "Ground-truth")
        p = self._index(pred[keep], "Prediction")
        n = len(self.classes)
        self.confusion += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        """New accumulator holding the counts of both."""
        if other.classes != self.classes:
            raise InvalidInputError(f"Cannot merge classes {self.classes} with {other.classes}")
        merged = ConfusionAccumulator(self.classes)
        merged.confusion = self.confusion + other.confusion
        return merged

    __add__ = merge

    def _row(self, class_id: int) -> int:
        if class_id not in self.classes:
            raise InvalidInputError(f"Unknown class {class_id}; accumulator has {self.classes}")
        return self.classes.index(class_id)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.confusion).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.confusion.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.confusion.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    def counts(self, class_id: int) -> Dict[str, int]:
        i = self._row(class_id)
        return {
            "tp": int(self.tp[i]),
            "fp": int(self.fp[i]),
            "fn": int(self.fn[i]),
            "tn": int(self.tn[i]),
        }


def iou(acc: ConfusionAccumulator, class_id: int) -> float:
    """
    TP / (TP + FP + FN) for one class.

    Returns:
        IOU in [0, 1], or UNDEFINED (nan) when the class is absent from
        both prediction and ground truth

    Raises:
        InvalidInputError: Unknown class
    """
    c = acc.counts(class_id)
    union = c["tp"] + c["fp"] + c["fn"]
    if union == 0:
        return UNDEFINED
    return c["tp"] / union


def mean_iou(acc: ConfusionAccumulator, classes: Iterable[int] = None) -> float:
    """Macro mean of the defined per-class IOUs."""
    values = [iou(acc, c) for c in (classes or acc.classes)]
    defined = [v for v in values if not np.isnan(v)]
    return float(np.mean(defined)) if defined else UNDEFINED


def _check_distribution(probs: np.ndarray, axis: int = 1, tolerance: float = 1e-6) -> None:
    sums = probs.sum(axis=axis)
    if not np.all(np.abs(sums - 1.0) <= tolerance):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise InvalidInputError(f"Probabilities are not normalized (max deviation {worst:.3g})")


def opacity_from_probs(
    probs: np.ndarray,
    group_ids: Sequence[int],
    opacity_groups: Tuple[int, ...] = None
) -> np.ndarray:
    """
    Binary opacity prediction by summed group mass.

    A pixel is opacity when the probability mass of the opacity groups
    exceeds the mass of all other groups.

    Args:
        probs: (N, G, H, W) group distributions
        group_ids: Group ID of each channel
    """
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)
    _check_distribution(probs)
    rows = [i for i, g in enumerate(group_ids) if g in opacity_groups]
    others = [i for i, g in enumerate(group_ids) if g not in opacity_groups]
    return probs[:, rows].sum(axis=1) > probs[:, others].sum(axis=1)


def opacity_from_argmax(
    probs: np.ndarray,
    group_ids: Sequence[int],
    opacity_groups: Tuple[int, ...] = None
) -> np.ndarray:
    """Binary opacity prediction by argmax group, for cross-checking."""
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)
    argmax = np.asarray(group_ids)[np.argmax(probs, axis=1)]
    return np.isin(argmax, opacity_groups)


def binarize_groups(groups: np.ndarray, opacity_groups: Tuple[int, ...] = None) -> np.ndarray:
    """Group labels to 1 (opacity) / 0 (other), keeping -1 as skip."""
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)
    binary = np.isin(groups, opacity_groups).astype(np.int8)
    return np.where(groups == UNLABELLED, UNLABELLED, binary).astype(np.int8)


def opacity_accumulator(
    pred_opacity: np.ndarray,
    gt_groups: np.ndarray,
    opacity_groups: Tuple[int, ...] = None,
    acc: ConfusionAccumulator = None
) -> ConfusionAccumulator:
    """Add a binary opacity prediction against group ground truth."""
    acc = acc or ConfusionAccumulator(BINARY_CLASSES)
    return acc.update(np.asarray(pred_opacity).astype(np.int8), binarize_groups(gt_groups, opacity_groups))


def opacity_iou(
    pred_probs: np.ndarray,
    gt: np.ndarray,
    group_ids: Sequence[int] = (0, 1, 2, 3, 4),
    opacity_groups: Tuple[int, ...] = None
) -> float:
    """
    Binary IOU between predicted opacity (summed group mass) and ground truth.

    Args:
        pred_probs: (N, G, H, W) predicted group distributions
        gt: (N, H, W) ground-truth groups; -1 pixels are skipped

    Raises:
        InvalidInputError: Shape mismatch or unnormalized distributions
    """
    pred_probs = np.asarray(pred_probs)
    gt = np.asarray(gt)
    if pred_probs.ndim != 4 or pred_probs.shape[0] != gt.shape[0] or pred_probs.shape[2:] != gt.shape[1:]:
        raise InvalidInputError(
            f"Prediction shape {pred_probs.shape} does not match ground truth {gt.shape}"
        )
    pred = opacity_from_probs(pred_probs, group_ids, opacity_groups)
    return iou(opacity_accumulator(pred, gt, opacity_groups), 1)


def relative_volume(acc: ConfusionAccumulator, class_id: int = 1) -> float:
    """
    (TP + FP) / (TP + FN) from counts integrated over an evaluation set.

    Raises:
        InvalidInputError: If the ground-truth volume is zero
    """
    c = acc.counts(class_id)
    gt_volume = c["tp"] + c["fn"]
    if gt_volume == 0:
        raise InvalidInputError("Relative volume undefined: ground truth has no opacity")
    return (c["tp"] + c["fp"]) / gt_volume


def percent_wal(
    pred_groups: np.ndarray,
    opacity_groups: Tuple[int, ...] = None,
    lung_group: int = LUNG_GROUP
) -> float:
    """
    Well-aerated lung fraction: lung / (lung + opacity) voxels.

    Raises:
        InvalidInputError: If there are no lung or opacity voxels
    """
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)
    pred_groups = np.asarray(pred_groups)
    lung = int((pred_groups == lung_group).sum())
    opacity = int(np.isin(pred_groups, opacity_groups).sum())
    if lung + opacity == 0:
        raise InvalidInputError("Percent WAL undefined: no lung or opacity voxels")
    return lung / (lung + opacity)


@dataclass(frozen=True)
class AgreementMatrix:
    """Pairwise and versus-average opacity IOU between annotators."""
    annotator_ids: Tuple[str, ...]
    pairwise: np.ndarray
    vs_average: np.ndarray

    def max_peer_iou(self) -> np.ndarray:
        """Largest off-diagonal entry per annotator."""
        off = self.pairwise.copy()
        np.fill_diagonal(off, -np.inf)
        return off.max(axis=1)


def _binary_iou(a: np.ndarray, b: np.ndarray, valid: np.ndarray) -> float:
    a = a & valid
    b = b & valid
    union = int((a | b).sum())
    if union == 0:
        # Both agree there is no opacity
        return 1.0
    return int((a & b).sum()) / union


def agreement(
    masks: Sequence[LabelMask],
    opacity_groups: Tuple[int, ...] = None,
    taxonomy: ClassTaxonomy = None
) -> AgreementMatrix:
    """
    Inter-observer opacity IOU.

    Each pair is scored over the pixels both annotators labelled; each
    annotator is scored against the average annotation over the pixels
    it labelled.

    Raises:
        InvalidInputError: Fewer than two masks or mismatched shapes
    """
    masks = list(masks)
    if len(masks) < 2:
        raise InvalidInputError("agreement needs at least two masks")
    check_same_geometry(masks)
    taxonomy = taxonomy or ClassTaxonomy()
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)

    groups = [class_to_group(m, taxonomy).labels for m in masks]
    opaque = [np.isin(g, opacity_groups) for g in groups]
    labelled = [g != UNLABELLED for g in groups]

    n = len(masks)
    pairwise = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            value = _binary_iou(opaque[i], opaque[j], labelled[i] & labelled[j])
            pairwise[i, j] = pairwise[j, i] = value

    average = average_annotation(masks, opacity_groups, taxonomy)
    vs_average = np.array([_binary_iou(opaque[i], average, labelled[i]) for i in range(n)])

    return AgreementMatrix(
        annotator_ids=tuple(m.annotator_id for m in masks),
        pairwise=pairwise,
        vs_average=vs_average,
    )


def group_report(
    pred_groups: np.ndarray,
    gt_groups: np.ndarray,
    group_ids: Sequence[int] = (0, 1, 2, 3, 4)
) -> ConfusionAccumulator:
    """Per-group accumulator for a hard prediction."""
    return ConfusionAccumulator(group_ids).update(pred_groups, gt_groups)


def summarize(
    pred_groups: np.ndarray,
    gt_groups: np.ndarray,
    pred_opacity: np.ndarray = None,
    opacity_groups: Tuple[int, ...] = None,
    group_ids: Sequence[int] = (0, 1, 2, 3, 4)
) -> List[Tuple[str, str, float]]:
    """
    All metrics for one scan as (metric, target, value) rows.

    pred_opacity overrides the opacity decision derived from
    pred_groups (e.g. the summed-mass rule on probabilities).
    """
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)
    acc = group_report(pred_groups, gt_groups, group_ids)
    rows = [("iou", f"group_{g}", iou(acc, g)) for g in group_ids]
    rows.append(("mean_iou", "groups", mean_iou(acc)))

    if pred_opacity is None:
        pred_opacity = np.isin(pred_groups, opacity_groups)
    binary = opacity_accumulator(pred_opacity, gt_groups, opacity_groups)
    rows.append(("opacity_iou", "opacity", iou(binary, 1)))
    try:
        rows.append(("relative_volume", "opacity", relative_volume(binary)))
    except InvalidInputError:
        logger.warning("Ground truth has no opacity; relative volume reported as undefined")
        rows.append(("relative_volume", "opacity", UNDEFINED))

    labelled = gt_groups != UNLABELLED
    for name, groups in (("pred", pred_groups), ("gt", gt_groups)):
        try:
            value = percent_wal(np.where(labelled, groups, UNLABELLED), opacity_groups)
        except InvalidInputError:
            value = UNDEFINED
        rows.append(("percent_wal", name, value))
    return rows
