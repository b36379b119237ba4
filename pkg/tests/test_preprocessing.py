"""Tests for lung windowing and normalization."""
import numpy as np
import pytest

from modules.errors import InvalidInputError
from modules.preprocessing import (
    apply_lung_window,
    compute_normalization_stats,
    denormalize,
    normalize,
    normalize_volume,
    volume_to_batch,
)
from modules.volume import CtVolume


def _volume(values):
    return CtVolume(voxels=np.asarray(values, dtype=np.int16).reshape(1, 1, -1))


class TestLungWindow:

    def test_clamps(self):
        windowed = apply_lung_window(_volume([-1200, -500, 3000]), -1000, 350)
        np.testing.assert_array_equal(windowed.voxels.ravel(), [-1000, -500, 350])

    def test_idempotent(self, rng):
        volume = CtVolume(voxels=rng.integers(-1024, 3071, size=(2, 8, 8)))
        once = apply_lung_window(volume)
        assert apply_lung_window(once) == once

    def test_keeps_spacing(self):
        volume = CtVolume(voxels=np.zeros((1, 2, 2), dtype=np.int16), spacing_mm=(5, 1, 1))
        assert apply_lung_window(volume).spacing_mm == (5.0, 1.0, 1.0)

    def test_inverted_window(self):
        with pytest.raises(InvalidInputError):
            apply_lung_window(_volume([0]), 350, -1000)


class TestNormalize:

    def test_reference_values(self):
        result = normalize(np.array([[-653.2, 350.0, -1000.0]]), -653.2, 628.5)
        np.testing.assert_allclose(
            result.values.ravel(), [0.0, 1003.2 / 628.5, -346.8 / 628.5], rtol=1e-12, atol=1e-15
        )
        assert result.values[0, 1] == pytest.approx(1.59619, abs=1e-5)
        assert result.values[0, 2] == pytest.approx(-0.55179, abs=1e-5)

    def test_inverse(self, rng):
        slice_hu = rng.uniform(-1000, 350, size=(16, 16))
        recovered = denormalize(normalize(slice_hu))
        np.testing.assert_allclose(recovered, slice_hu, rtol=1e-9)

    def test_bounds(self):
        low, high = normalize(np.zeros((2, 2))).bounds
        assert low == pytest.approx(-346.8 / 628.5)
        assert high == pytest.approx(1003.2 / 628.5)

    def test_non_positive_std(self):
        with pytest.raises(InvalidInputError, match="std"):
            normalize(np.zeros((2, 2)), std=0.0)

    def test_unwindowed_slice_rejected(self):
        with pytest.raises(InvalidInputError, match="window"):
            normalize(np.array([[-1200.0, 0.0]]))

    def test_volume_helpers(self, phantom):
        volume, _ = phantom
        slices = normalize_volume(volume)
        batch = volume_to_batch(volume)
        assert len(slices) == volume.depth
        assert batch.shape == volume.shape and batch.dtype == np.float64
        np.testing.assert_array_equal(batch[1], slices[1].values)


class TestNormalizationStats:

    def test_known_values(self):
        stats = compute_normalization_stats([_volume([-1000, 0]), _volume([-1000, 0])])
        assert stats.mean_hu == -500.0
        assert stats.std_hu == 500.0
        assert stats.n_voxels == 4

    def test_window_applied_first(self):
        stats = compute_normalization_stats([_volume([3000, 350])])
        assert stats.mean_hu == 350.0
        assert stats.std_hu == 0.0

    def test_order_independent(self, rng):
        volumes = [CtVolume(voxels=rng.integers(-1024, 3071, size=(2, 4, 4))) for _ in range(3)]
        assert compute_normalization_stats(volumes) == compute_normalization_stats(volumes[::-1])

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            compute_normalization_stats([])
