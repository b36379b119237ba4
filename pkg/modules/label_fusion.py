"""
Label Fusion Module

Treats every annotator's hard label as a one-hot sample of an unknown
per-pixel distribution and summarizes N annotators by the first and
second moments of those samples.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from config import CONFIDENCE_EPSILON, OPACITY_GROUPS
from modules.errors import InvalidInputError
from modules.taxonomy import ClassTaxonomy, UNLABELLED
from modules.volume import LabelMask, check_same_geometry, class_to_group
from modules.volume_io import (
    atomic_write_bytes,
    atomic_write_text,
    dump_json,
    read_header,
    read_payload,
    sidecar_path,
)

logger = logging.getLogger(__name__)

SOFT_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class SoftLabel:
    """
    Per-pixel categorical mean and standard deviation from N annotators.

    Arrays are laid out (depth, class, height, width) for mean/std and
    (depth, height, width) for support. A support of 0 is the "no target"
    marker: mean and std are zero there.
    """
    mean: np.ndarray
    std: np.ndarray
    support: np.ndarray
    n_annotators: int
    classes: Tuple[int, ...]

    @property
    def supported(self) -> np.ndarray:
        return self.support > 0

    @property
    def shape(self) -> Tuple[int, int, int]:
        d, _, h, w = self.mean.shape
        return (d, h, w)

    def hard_labels(self) -> np.ndarray:
        """Consensus argmax label per pixel; Unlabelled where unsupported."""
        idx = np.argmax(self.mean, axis=1)
        labels = np.asarray(self.classes, dtype=np.int16)[idx]
        return np.where(self.supported, labels, UNLABELLED).astype(np.int8)

    def mass(self, classes: Sequence[int]) -> np.ndarray:
        """Summed mean probability of the given classes per pixel."""
        rows = [self.classes.index(c) for c in classes if c in self.classes]
        if not rows:
            return np.zeros(self.support.shape)
        return self.mean[:, rows].sum(axis=1)


@dataclass(frozen=True)
class GaussianTarget:
    """Training target and per-pixel confidence derived from a SoftLabel."""
    target: np.ndarray
    weight: np.ndarray
    raw_weight: np.ndarray


def _stack(masks: Sequence[LabelMask], taxonomy: ClassTaxonomy, by_group: bool) -> np.ndarray:
    check_same_geometry(masks)
    if by_group:
        masks = [class_to_group(m, taxonomy) for m in masks]
    return np.stack([m.labels for m in masks]).astype(np.int16)


def fuse(
    masks: Sequence[LabelMask],
    taxonomy: ClassTaxonomy = None,
    by_group: bool = False
) -> SoftLabel:
    """
    Fuse annotator masks into per-pixel mean and population std maps.

    Annotators marking a pixel Unlabelled do not count towards that
    pixel's support. Both moments come from integer vote counts, so the
    result is bit-identical under any annotator ordering.

    Args:
        masks: Masks over identical geometry
        taxonomy: Class table
        by_group: Fuse group IDs (0..4) instead of class IDs (0..10)

    Returns:
        SoftLabel over the labelled classes or groups

    Raises:
        InvalidInputError: No masks, or mismatched shapes
    """
    masks = list(masks)
    if not masks:
        raise InvalidInputError("fuse needs at least one mask")
    taxonomy = taxonomy or ClassTaxonomy()
    stack = _stack(masks, taxonomy, by_group)
    classes = tuple(taxonomy.group_ids if by_group else taxonomy.labelled_class_ids)

    support = (stack != UNLABELLED).sum(axis=0).astype(np.int64)
    counts = np.stack([(stack == c).sum(axis=0) for c in classes], axis=1).astype(np.int64)

    denom = np.where(support > 0, support, 1)[:, np.newaxis]
    mean = counts / denom
    # Population std of 0/1 samples: sqrt(k (n - k)) / n
    std = np.sqrt(counts * (denom - counts)) / denom

    unsupported = (support == 0)[:, np.newaxis]
    mean = np.where(unsupported, 0.0, mean)
    std = np.where(unsupported, 0.0, std)

    logger.debug(
        "Fused %d masks over %d classes, %d supported pixels",
        len(masks), len(classes), int((support > 0).sum())
    )
    return SoftLabel(mean=mean, std=std, support=support, n_annotators=len(masks), classes=classes)


def opacity_votes(
    masks: Sequence[LabelMask],
    taxonomy: ClassTaxonomy = None,
    opacity_groups: Tuple[int, ...] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel count of opacity votes and of annotators labelling the pixel."""
    taxonomy = taxonomy or ClassTaxonomy()
    opacity_groups = tuple(opacity_groups or OPACITY_GROUPS)
    stack = _stack(list(masks), taxonomy, by_group=True)
    support = (stack != UNLABELLED).sum(axis=0)
    votes = np.isin(stack, opacity_groups).sum(axis=0)
    return votes, support


def average_annotation(
    masks: Sequence[LabelMask],
    opacity_groups: Tuple[int, ...] = None,
    taxonomy: ClassTaxonomy = None
) -> np.ndarray:
    """
    Binary "average annotator" opacity mask.

    A pixel is opacity when at least half of the annotators who labelled
    it marked an opacity group (ties count as opacity). Pixels nobody
    labelled are not opacity.

    Raises:
        InvalidInputError: Fewer than two masks or mismatched shapes
    """
    masks = list(masks)
    if len(masks) < 2:
        raise InvalidInputError("average_annotation needs at least two masks")
    votes, support = opacity_votes(masks, taxonomy, opacity_groups)
    return (support > 0) & (2 * votes >= support)


def gaussian_target(soft: SoftLabel, epsilon: float = None) -> GaussianTarget:
    """
    Target distribution and confidence weights for KL training.

    The target is the fused mean. Each supported pixel is weighted by
    1 / (mean_c sigma_c^2 + epsilon), rescaled to average 1 over the
    supported pixels; unsupported pixels get weight 0.

    Raises:
        InvalidInputError: If epsilon <= 0
    """
    epsilon = CONFIDENCE_EPSILON if epsilon is None else epsilon
    if not epsilon > 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")

    supported = soft.supported
    raw = 1.0 / (np.mean(soft.std ** 2, axis=1) + epsilon)
    raw = np.where(supported, raw, 0.0)

    weight = np.zeros_like(raw)
    if supported.any():
        weight = np.where(supported, raw / raw[supported].mean(), 0.0)

    return GaussianTarget(target=soft.mean.copy(), weight=weight, raw_weight=raw)


def save_soft_label(path: Union[str, Path], soft: SoftLabel) -> None:
    """
    Write a SoftLabel as float32 planes with a JSON sidecar.

    Per slice: the mean planes, then the std planes, then one support plane.
    """
    depth, n_classes, height, width = soft.mean.shape
    planes = np.concatenate(
        [soft.mean, soft.std, soft.support[:, np.newaxis].astype(np.float64)], axis=1
    )
    header = {
        "classes": list(soft.classes),
        "n_annotators": soft.n_annotators,
        "shape": [depth, height, width],
    }
    atomic_write_bytes(path, planes.astype(SOFT_DTYPE).tobytes(order="C"))
    atomic_write_text(sidecar_path(path), dump_json(header))


def load_soft_label(path: Union[str, Path]) -> SoftLabel:
    """Read a SoftLabel written by save_soft_label (values as float64)."""
    header = read_header(path)
    classes = tuple(int(c) for c in header.get("classes", []))
    if not classes:
        raise InvalidInputError(f"{path}: header lists no classes")
    n_planes = 2 * len(classes) + 1
    flat = read_payload(path, header, SOFT_DTYPE, planes_per_voxel=n_planes)
    depth, height, width = header["shape"]
    planes = flat.reshape(depth, n_planes, height, width).astype(np.float64)
    c = len(classes)
    return SoftLabel(
        mean=planes[:, :c],
        std=planes[:, c:2 * c],
        support=planes[:, 2 * c].astype(np.int64),
        n_annotators=int(header["n_annotators"]),
        classes=classes,
    )
