"""
Preprocessing Module

Lung windowing and per-slice normalization of CT data with global
constants, plus the statistics pass that recomputes those constants
from a training set.
"""
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np

from config import LUNG_WINDOW_LOW_HU, LUNG_WINDOW_HIGH_HU, NORM_MEAN_HU, NORM_STD_HU
from modules.errors import InvalidInputError
from modules.volume import CtVolume


@dataclass(frozen=True)
class NormalizedSlice:
    """A windowed slice mapped to zero mean / unit std under the global constants."""
    values: np.ndarray
    window: Tuple[float, float]
    norm_mean_hu: float
    norm_std_hu: float

    @property
    def bounds(self) -> Tuple[float, float]:
        low, high = self.window
        return (
            (low - self.norm_mean_hu) / self.norm_std_hu,
            (high - self.norm_mean_hu) / self.norm_std_hu,
        )


@dataclass(frozen=True)
class NormalizationStats:
    """Mean and standard deviation of windowed training voxels."""
    mean_hu: float
    std_hu: float
    n_voxels: int


def _check_window(low: float, high: float) -> None:
    if not low < high:
        raise InvalidInputError(f"Window low ({low}) must be below high ({high})")


def apply_lung_window(volume: CtVolume, low: int = None, high: int = None) -> CtVolume:
    """
    Clamp every voxel into [low, high].

    Args:
        volume: Input CT volume
        low: Lower bound in HU (default -1000)
        high: Upper bound in HU (default 350)

    Returns:
        New volume with the same shape and spacing

    Raises:
        InvalidInputError: If low >= high
    """
    low = LUNG_WINDOW_LOW_HU if low is None else low
    high = LUNG_WINDOW_HIGH_HU if high is None else high
    _check_window(low, high)
    clipped = np.clip(volume.voxels, low, high)
    return CtVolume(voxels=clipped, spacing_mm=volume.spacing_mm)


def normalize(
    slice_hu: np.ndarray,
    mean: float = None,
    std: float = None,
    window: Tuple[float, float] = None
) -> NormalizedSlice:
    """
    Map a windowed HU slice to (slice - mean) / std.

    Args:
        slice_hu: 2D array already clamped into the window
        mean: Normalization mean in HU
        std: Normalization standard deviation in HU
        window: The (low, high) window the slice was clamped to

    Raises:
        InvalidInputError: If std <= 0 or the slice lies outside the window
    """
    mean = NORM_MEAN_HU if mean is None else float(mean)
    std = NORM_STD_HU if std is None else float(std)
    window = window or (LUNG_WINDOW_LOW_HU, LUNG_WINDOW_HIGH_HU)
    if not std > 0:
        raise InvalidInputError(f"Normalization std must be positive, got {std}")
    _check_window(*window)

    values = np.asarray(slice_hu, dtype=np.float64)
    if values.size and (values.min() < window[0] or values.max() > window[1]):
        raise InvalidInputError(
            f"Slice spans [{values.min()}, {values.max()}] HU, outside window {tuple(window)}; "
            "apply the lung window first"
        )

    return NormalizedSlice(
        values=(values - mean) / std,
        window=(float(window[0]), float(window[1])),
        norm_mean_hu=mean,
        norm_std_hu=std,
    )


def denormalize(normalized: NormalizedSlice) -> np.ndarray:
    """Recover windowed HU values from a normalized slice."""
    return normalized.values * normalized.norm_std_hu + normalized.norm_mean_hu


def normalize_volume(
    volume: CtVolume,
    mean: float = None,
    std: float = None,
    window: Tuple[float, float] = None
) -> List[NormalizedSlice]:
    """Window a volume and normalize each slice with the global constants."""
    window = window or (LUNG_WINDOW_LOW_HU, LUNG_WINDOW_HIGH_HU)
    windowed = apply_lung_window(volume, *window)
    return [normalize(windowed.slice(z), mean, std, window) for z in range(windowed.depth)]


def volume_to_batch(
    volume: CtVolume,
    mean: float = None,
    std: float = None,
    window: Tuple[float, float] = None
) -> np.ndarray:
    """Normalized slices stacked as a (depth, height, width) float64 array."""
    return np.stack([s.values for s in normalize_volume(volume, mean, std, window)])


def compute_normalization_stats(
    volumes: Iterable[CtVolume],
    window: Tuple[float, float] = None
) -> NormalizationStats:
    """
    Mean and population std of all windowed voxels across a training set.

    Accumulates integer sums so the result does not depend on volume order.
    """
    window = window or (LUNG_WINDOW_LOW_HU, LUNG_WINDOW_HIGH_HU)
    _check_window(*window)

    n = 0
    total = 0
    total_sq = 0
    for volume in volumes:
        v = apply_lung_window(volume, *window).voxels.astype(np.int64)
        n += v.size
        total += int(v.sum())
        total_sq += int((v * v).sum())

    if n == 0:
        raise InvalidInputError("No voxels to compute normalization statistics from")

    mean = total / n
    variance = total_sq / n - mean * mean
    return NormalizationStats(mean_hu=mean, std_hu=float(np.sqrt(max(variance, 0.0))), n_voxels=n)
