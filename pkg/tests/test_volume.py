"""Tests for CT volumes, label masks and their file format."""
import json

import numpy as np
import pytest

from modules.errors import InvalidInputError, VolumeIOError
from modules.volume import CtVolume, LabelMask, check_same_geometry
from modules.volume_io import load_mask, load_volume, save_mask, save_volume, sidecar_path


class TestCtVolume:

    def test_immutable(self):
        volume = CtVolume(voxels=np.zeros((2, 3, 3), dtype=np.int32))
        assert volume.voxels.dtype == np.int16
        with pytest.raises(ValueError):
            volume.voxels[0, 0, 0] = 5

    def test_rejects_float_and_2d(self):
        with pytest.raises(InvalidInputError):
            CtVolume(voxels=np.zeros((2, 3, 3)))
        with pytest.raises(InvalidInputError):
            CtVolume(voxels=np.zeros((3, 3), dtype=np.int16))

    def test_rejects_bad_spacing(self):
        with pytest.raises(InvalidInputError, match="spacing_mm"):
            CtVolume(voxels=np.zeros((1, 2, 2), dtype=np.int16), spacing_mm=(1.0, 0.0, 1.0))

    def test_rejects_values_outside_int16(self):
        voxels = np.zeros((1, 2, 2), dtype=np.int32)
        voxels[0, 1, 1] = 40000
        with pytest.raises(InvalidInputError, match="int16"):
            CtVolume(voxels=voxels)
        voxels[0, 1, 1] = -40000
        with pytest.raises(InvalidInputError, match="int16"):
            CtVolume(voxels=voxels)

    def test_int16_extremes_kept(self):
        voxels = np.array([[[-32768, 32767]]], dtype=np.int64)
        np.testing.assert_array_equal(CtVolume(voxels=voxels).voxels, voxels)


class TestLabelMask:

    def test_2d_is_promoted(self, make_mask):
        mask = make_mask([[0, 1], [2, 5]])
        assert mask.shape == (1, 2, 2)

    def test_labelled_slices_inferred(self, make_mask):
        labels = np.full((3, 2, 2), -1)
        labels[1] = 0
        assert make_mask(labels).labelled_slices == frozenset({1})

    def test_fractional_class_ids_rejected(self):
        with pytest.raises(InvalidInputError, match="2.5"):
            LabelMask(labels=np.array([[[0.0, 2.5]]]))
        with pytest.raises(InvalidInputError):
            LabelMask(labels=np.array([[[9.9, 1.0]]]))

    def test_integral_floats_accepted(self):
        mask = LabelMask(labels=np.array([[[0.0, 2.0], [-1.0, 10.0]]]))
        np.testing.assert_array_equal(mask.labels, [[[0, 2], [-1, 10]]])

    def test_stray_labelled_slice_rejected(self):
        labels = np.full((3, 2, 2), -1)
        labels[2] = 1
        with pytest.raises(InvalidInputError, match=r"\[2\]"):
            LabelMask(labels=labels, labelled_slices={0})

    def test_geometry_check(self, make_mask):
        with pytest.raises(InvalidInputError):
            check_same_geometry([make_mask(np.zeros((1, 2, 2))), make_mask(np.zeros((1, 2, 3)))])


class TestVolumeFiles:
    """Flat payloads with JSON sidecars."""

    def test_volume_round_trip(self, tmp_path, rng):
        volume = CtVolume(voxels=rng.integers(-1024, 3071, size=(3, 5, 4)), spacing_mm=(2.5, 0.7, 0.7))
        path = tmp_path / "scan.ctv"
        save_volume(path, volume)
        assert load_volume(path) == volume

    def test_volume_sidecar(self, tmp_path):
        path = tmp_path / "scan.ctv"
        save_volume(path, CtVolume(voxels=np.zeros((2, 4, 4), dtype=np.int16)))
        header = json.loads(sidecar_path(path).read_text())
        assert header == {"shape": [2, 4, 4], "spacing_mm": [1.0, 1.0, 1.0], "dtype": "i16", "kind": "ct"}
        assert sidecar_path(path).name == "scan.ctv.json"

    def _write_raw(self, tmp_path, n_bytes):
        path = tmp_path / "raw.ctv"
        path.write_bytes(bytes(n_bytes))
        sidecar_path(path).write_text(json.dumps(
            {"shape": [2, 4, 4], "spacing_mm": [1, 1, 1], "dtype": "i16", "kind": "ct"}
        ))
        return path

    def test_matching_payload_accepted(self, tmp_path):
        assert load_volume(self._write_raw(tmp_path, 64)).shape == (2, 4, 4)

    def test_short_payload_rejected(self, tmp_path):
        with pytest.raises(VolumeIOError, match="60 bytes"):
            load_volume(self._write_raw(tmp_path, 60))

    def test_missing_header(self, tmp_path):
        path = tmp_path / "lonely.ctv"
        path.write_bytes(bytes(8))
        with pytest.raises(VolumeIOError, match="Missing header"):
            load_volume(path)

    def test_mask_as_volume_rejected(self, tmp_path, make_mask):
        path = tmp_path / "m.msk"
        save_mask(path, make_mask(np.zeros((1, 2, 2))))
        with pytest.raises(VolumeIOError, match="kind"):
            load_volume(path)

    def test_mask_round_trip(self, tmp_path, make_mask):
        labels = np.full((3, 4, 4), -1)
        labels[0] = np.arange(16).reshape(4, 4) % 11
        labels[2, 1, 1] = 10
        path = tmp_path / "annotator_03.msk"
        save_mask(path, make_mask(labels))
        loaded = load_mask(path)
        np.testing.assert_array_equal(loaded.labels, labels)
        assert loaded.labelled_slices == frozenset({0, 2})
        assert loaded.annotator_id == "annotator_03"

    def test_mask_storage_offset(self, tmp_path, make_mask):
        path = tmp_path / "m.msk"
        save_mask(path, make_mask([[-1, 0], [4, 10]]))
        assert path.read_bytes() == bytes([0, 1, 5, 11])
        assert set(json.loads(sidecar_path(path).read_text())) == {"shape", "spacing_mm", "dtype", "kind"}

    def test_invalid_stored_class(self, tmp_path):
        path = tmp_path / "bad.msk"
        path.write_bytes(bytes([0, 1, 2, 40]))
        sidecar_path(path).write_text(json.dumps(
            {"shape": [1, 2, 2], "spacing_mm": [1, 1, 1], "dtype": "u8+offset", "kind": "mask"}
        ))
        with pytest.raises(InvalidInputError, match="39"):
            load_mask(path)
