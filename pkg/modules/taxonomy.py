"""
Class Taxonomy Module

The twelve annotation classes, the clinical groups they collapse into,
and their prevalence in the annotated dataset.
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from modules.errors import InvalidInputError


UNLABELLED = -1


@dataclass(frozen=True)
class TaxonomyEntry:
    """One annotation class and the group it trains as."""
    class_id: int
    name: str
    group_id: int
    prevalence: float


@dataclass(frozen=True)
class GroupInfo:
    """Display metadata for a training group."""
    group_id: int
    name: str
    colour: str
    rgb: Tuple[int, int, int]


DEFAULT_ENTRIES: Tuple[TaxonomyEntry, ...] = (
    TaxonomyEntry(-1, "Unlabelled", -1, 0.0312350),
    TaxonomyEntry(0, "Background", 0, 0.9470900),
    TaxonomyEntry(1, "Left Lung", 1, 0.0048229),
    TaxonomyEntry(2, "Right Lung", 1, 0.0052713),
    TaxonomyEntry(3, "Pleural Effusion", 0, 0.0002021),
    TaxonomyEntry(4, "Lymphadenopathy", 0, 0.0000002),
    TaxonomyEntry(5, "Pure Ground Glass Opacification", 2, 0.0033230),
    TaxonomyEntry(6, "GGO w/ Smooth Interlobular Septal Thickening", 3, 0.0004404),
    TaxonomyEntry(7, "GGO w/ Intralobular Lines (Crazy Paving)", 3, 0.0044893),
    TaxonomyEntry(8, "Organizing Pneumonia Pattern", 4, 0.0012062),
    TaxonomyEntry(9, "GGO w/ Peripheral Consolidation (Atoll Sign)", 4, 0.0001665),
    TaxonomyEntry(10, "Consolidation", 4, 0.0017524),
)

GROUPS: Dict[int, GroupInfo] = {
    -1: GroupInfo(-1, "Unlabelled", "Blue", (31, 119, 180)),
    0: GroupInfo(0, "Background", "Orange", (255, 127, 14)),
    1: GroupInfo(1, "Lung", "Green", (44, 160, 44)),
    2: GroupInfo(2, "Pure GGO", "Red", (214, 39, 40)),
    3: GroupInfo(3, "GGO w/ Septal Lines", "Purple", (148, 103, 189)),
    4: GroupInfo(4, "Consolidation Patterns", "Brown", (140, 86, 75)),
}

# Class used when a simulated region is assigned a group
REPRESENTATIVE_CLASS: Dict[int, int] = {0: 0, 1: 1, 2: 5, 3: 7, 4: 10}

_EXPECTED_GROUPS = {
    -1: -1, 0: 0, 1: 1, 2: 1, 3: 0, 4: 0, 5: 2, 6: 3, 7: 3, 8: 4, 9: 4, 10: 4
}


class ClassTaxonomy:
    """
    Ordered class table with class-to-group lookup.

    Validates the table on construction: twelve entries, class IDs
    -1..10 each once, the fixed group assignment and prevalences that
    sum to one.
    """

    def __init__(self, entries: Tuple[TaxonomyEntry, ...] = None):
        """
        Initialize the taxonomy.

        Args:
            entries: Class table; defaults to the annotated dataset's table
        """
        self.entries = tuple(entries or DEFAULT_ENTRIES)
        self._validate()

        # Lookup table indexed by class_id + 1
        self._group_lut = np.array(
            [e.group_id for e in sorted(self.entries, key=lambda e: e.class_id)],
            dtype=np.int8
        )

    def _validate(self) -> None:
        ids = [e.class_id for e in self.entries]
        if len(self.entries) != 12 or sorted(ids) != list(range(-1, 11)):
            raise InvalidInputError(
                f"Taxonomy must list class IDs -1..10 exactly once, got {ids}"
            )

        for entry in self.entries:
            if _EXPECTED_GROUPS[entry.class_id] != entry.group_id:
                raise InvalidInputError(
                    f"Class {entry.class_id} must belong to group "
                    f"{_EXPECTED_GROUPS[entry.class_id]}, got {entry.group_id}"
                )
            if not 0.0 <= entry.prevalence <= 1.0:
                raise InvalidInputError(
                    f"Prevalence of class {entry.class_id} out of [0, 1]: {entry.prevalence}"
                )

        total = sum(e.prevalence for e in self.entries)
        if abs(total - 1.0) > 1e-4:
            raise InvalidInputError(f"Class prevalences sum to {total}, expected 1")

    @property
    def class_ids(self) -> List[int]:
        """All class IDs including Unlabelled."""
        return sorted(e.class_id for e in self.entries)

    @property
    def labelled_class_ids(self) -> List[int]:
        """Class IDs that can be prediction targets (0..10)."""
        return [c for c in self.class_ids if c != UNLABELLED]

    @property
    def group_ids(self) -> List[int]:
        """Training group IDs (0..4)."""
        return sorted({e.group_id for e in self.entries if e.group_id != UNLABELLED})

    def entry(self, class_id: int) -> TaxonomyEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise InvalidInputError(f"Unknown class ID: {class_id}")

    def group_of(self, class_id: int) -> int:
        return self.entry(class_id).group_id

    def is_valid(self, labels: np.ndarray) -> np.ndarray:
        """Elementwise check that values are known (integral) class IDs."""
        labels = np.asarray(labels)
        in_range = (labels >= -1) & (labels <= 10)
        if np.issubdtype(labels.dtype, np.integer) or labels.dtype == bool:
            return in_range
        return in_range & (labels == np.round(labels))

    def check_labels(self, labels: np.ndarray) -> None:
        """
        Raise if any value is not a class ID.

        The message names the first offending value and its index.
        """
        labels = np.asarray(labels)
        bad = ~self.is_valid(labels)
        if bad.any():
            index = tuple(int(i) for i in np.argwhere(bad)[0])
            raise InvalidInputError(
                f"Invalid class ID {labels[index]} at voxel {index}"
            )

    def groups_for(self, labels: np.ndarray) -> np.ndarray:
        """Map an array of class IDs to group IDs."""
        self.check_labels(labels)
        return self._group_lut[labels.astype(np.int64) + 1]

    def group_prevalences(self) -> Dict[int, float]:
        """Sum class prevalences per group (Unlabelled stays its own group)."""
        totals: Dict[int, float] = {}
        for e in self.entries:
            totals[e.group_id] = totals.get(e.group_id, 0.0) + e.prevalence
        return totals

    def opacity_class_ids(self, opacity_groups: Tuple[int, ...]) -> List[int]:
        return [e.class_id for e in self.entries if e.group_id in opacity_groups]
