"""
Scan-Level Dataset Splitting

All slices of a scan stay in one partition. The test set is chosen
explicitly (for example every scan from held-out sites); the remaining
scans are shuffled and divided between validation and training.
"""
from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, Sequence, Tuple

import numpy as np

from modules.errors import InvalidInputError


@dataclass(frozen=True)
class ScanSplit:
    """Disjoint train / validation / test partition of scan IDs."""
    train: Tuple[Hashable, ...]
    val: Tuple[Hashable, ...]
    test: Tuple[Hashable, ...]

    def sizes(self) -> Dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def validation_count(n_remaining: int, val_fraction: float) -> int:
    """round(val_fraction * n) with halves rounded up, at least one."""
    return max(1, int(np.floor(val_fraction * n_remaining + 0.5)))


def split_scans(
    scan_ids: Sequence[Hashable],
    test_ids: Iterable[Hashable],
    val_fraction: float = 0.2,
    seed: int = 0
) -> ScanSplit:
    """
    Partition scan IDs into train, validation and test sets.

    Args:
        scan_ids: All scan IDs (unique)
        test_ids: Scans reserved for testing; must be a subset of scan_ids
        val_fraction: Share of the remaining scans used for validation
        seed: Seed for the shuffle of the remaining scans

    Returns:
        ScanSplit whose test set equals test_ids

    Raises:
        InvalidInputError: Unknown test IDs, duplicate scan IDs, a bad
            fraction, or fewer than two scans left after the test set
    """
    scan_ids = list(scan_ids)
    test_ids = list(test_ids)
    if len(set(scan_ids)) != len(scan_ids):
        raise InvalidInputError("Scan IDs must be unique")
    if not 0.0 < val_fraction < 1.0:
        raise InvalidInputError(f"val_fraction must lie in (0, 1), got {val_fraction}")

    unknown = [t for t in test_ids if t not in set(scan_ids)]
    if unknown:
        raise InvalidInputError(f"Unknown test scan IDs: {unknown}")

    test_set = set(test_ids)
    remaining = [s for s in scan_ids if s not in test_set]
    if not remaining:
        raise InvalidInputError("No scans remain after removing the test set")
    if len(remaining) < 2:
        raise InvalidInputError(
            "At least two scans must remain after the test set to form train and validation sets"
        )

    # Shuffle a canonical order so the result ignores input ordering
    remaining = sorted(remaining, key=repr)
    order = np.random.default_rng(seed).permutation(len(remaining))
    shuffled = [remaining[i] for i in order]

    n_val = min(validation_count(len(shuffled), val_fraction), len(shuffled) - 1)
    return ScanSplit(
        train=tuple(shuffled[n_val:]),
        val=tuple(shuffled[:n_val]),
        test=tuple(t for t in scan_ids if t in test_set),
    )


def select_test_by_site(scan_sites: Dict[Hashable, str], held_out_sites: Iterable[str]) -> List[Hashable]:
    """
    Every scan acquired at one of the held-out sites.

    Raises:
        InvalidInputError: If a held-out site has no scans
    """
    held_out = set(held_out_sites)
    missing = held_out - set(scan_sites.values())
    if missing:
        raise InvalidInputError(f"No scans from held-out sites: {sorted(missing)}")
    return [scan for scan, site in scan_sites.items() if site in held_out]
