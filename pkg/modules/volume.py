"""
Volume Data Model

CT volumes in Hounsfield units and per-annotator label masks aligned
to them. Both are immutable after construction.
"""
from dataclasses import dataclass, field
from typing import FrozenSet, Tuple

import numpy as np

from modules.errors import InvalidInputError
from modules.taxonomy import ClassTaxonomy, UNLABELLED


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_spacing(spacing_mm) -> Tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise InvalidInputError(f"spacing_mm must be three positive reals, got {spacing_mm}")
    return spacing


@dataclass(frozen=True)
class CtVolume:
    """
    A CT volume of integer attenuation values.

    Axis order is (depth, height, width), i.e. z-y-x; spacing_mm follows
    the same order.
    """
    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise InvalidInputError(f"CT volume must be 3D and non-empty, got shape {voxels.shape}")
        if not np.issubdtype(voxels.dtype, np.integer):
            raise InvalidInputError(f"CT voxels must be integers, got {voxels.dtype}")
        info = np.iinfo(np.int16)
        if voxels.min() < info.min or voxels.max() > info.max:
            raise InvalidInputError(
                f"CT voxels must fit in int16, got range [{voxels.min()}, {voxels.max()}]"
            )
        object.__setattr__(self, "voxels", _frozen(voxels.astype(np.int16)))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.voxels.shape)

    @property
    def depth(self) -> int:
        return self.shape[0]

    def slice(self, index: int) -> np.ndarray:
        return self.voxels[index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CtVolume):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True)
class LabelMask:
    """
    Per-voxel class IDs produced by one annotator.

    Slices outside labelled_slices hold only Unlabelled (-1). When
    labelled_slices is not given it is inferred from the content.
    """
    labels: np.ndarray
    annotator_id: str = "truth"
    labelled_slices: FrozenSet[int] = None
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    taxonomy: ClassTaxonomy = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 2:
            labels = labels[np.newaxis]
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise InvalidInputError(f"Label mask must be 2D or 3D, got shape {labels.shape}")

        taxonomy = self.taxonomy or ClassTaxonomy()
        taxonomy.check_labels(labels)
        labels = labels.astype(np.int8)

        present = frozenset(
            int(z) for z in np.flatnonzero((labels != UNLABELLED).any(axis=(1, 2)))
        )
        if self.labelled_slices is None:
            labelled = present
        else:
            labelled = frozenset(int(z) for z in self.labelled_slices)
            stray = present - labelled
            if stray:
                raise InvalidInputError(
                    f"Slices {sorted(stray)} carry labels but are not in labelled_slices"
                )
            if any(z < 0 or z >= labels.shape[0] for z in labelled):
                raise InvalidInputError(f"labelled_slices out of range: {sorted(labelled)}")

        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "labelled_slices", labelled)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))
        object.__setattr__(self, "taxonomy", taxonomy)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.labels.shape)

    def check_aligned(self, volume: CtVolume) -> None:
        if self.shape != volume.shape:
            raise InvalidInputError(
                f"Mask shape {self.shape} does not match volume shape {volume.shape}"
            )

    def with_labels(self, labels: np.ndarray, annotator_id: str = None) -> "LabelMask":
        """Copy of this mask with new labels and the same metadata."""
        return LabelMask(
            labels=labels,
            annotator_id=annotator_id or self.annotator_id,
            labelled_slices=None,
            spacing_mm=self.spacing_mm,
            taxonomy=self.taxonomy,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return (
            self.annotator_id == other.annotator_id
            and self.labelled_slices == other.labelled_slices
            and np.array_equal(self.labels, other.labels)
        )


def class_to_group(mask: LabelMask, taxonomy: ClassTaxonomy = None) -> LabelMask:
    """
    Replace every class ID with its group ID.

    Args:
        mask: Class-level mask
        taxonomy: Class table; defaults to the mask's own

    Returns:
        Group-level mask with the same shape, annotator and slices

    Raises:
        InvalidInputError: If a value is not a known class ID
    """
    taxonomy = taxonomy or mask.taxonomy
    groups = taxonomy.groups_for(mask.labels)
    return LabelMask(
        labels=groups,
        annotator_id=mask.annotator_id,
        labelled_slices=mask.labelled_slices,
        spacing_mm=mask.spacing_mm,
        taxonomy=taxonomy,
    )


def check_same_geometry(masks) -> Tuple[int, int, int]:
    """Raise unless all masks share one shape; return that shape."""
    masks = list(masks)
    if not masks:
        raise InvalidInputError("At least one mask is required")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise InvalidInputError(
                f"Mask '{m.annotator_id}' has shape {m.shape}, expected {shape}"
            )
    return shape
