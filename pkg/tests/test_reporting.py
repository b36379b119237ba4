import io
import json

import numpy as np
import pytest
from PIL import Image

from modules.metrics import AgreementMatrix
from modules.reporting import (
    RunManifest,
    config_hash,
    format_value,
    render_overlay,
    save_overlay,
    utc_now,
    write_agreement_csv,
    write_epoch_log_csv,
    write_manifest,
    write_metrics_csv,
)
from modules.taxonomy import GROUPS
from modules.training import EpochRecord


class TestCsv:

    def test_metrics_csv(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [("scan_000", "iou", "group_2", 0.5), ("scan_000", "iou", "group_3", float("nan"))])
        data = path.read_bytes()
        assert data == (
            b"scan,metric,target,value\r\n"
            b"scan_000,iou,group_2,0.5\r\n"
            b"scan_000,iou,group_3,nan\r\n"
        )

    def test_values_round_trip(self):
        value = 1 / 3
        assert float(format_value(value)) == value
        assert format_value(float("nan")) == "nan"
        assert format_value(1) == "1.0"

    def test_fields_are_quoted(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [("scan,1", "iou", "group_2", 1.0)])
        assert b'"scan,1",iou,group_2,1.0\r\n' in path.read_bytes()

    def test_agreement_csv(self, tmp_path):
        matrix = AgreementMatrix(
            annotator_ids=("a", "b"),
            pairwise=np.array([[1.0, 0.25], [0.25, 1.0]]),
            vs_average=np.array([0.5, 0.75]),
        )
        path = tmp_path / "agreement.csv"
        write_agreement_csv(path, matrix)
        lines = path.read_bytes().split(b"\r\n")
        assert lines[0] == b"annotator,a,b,vs_average"
        assert lines[1] == b"a,1.0,0.25,0.5"
        assert lines[2] == b"b,0.25,1.0,0.75"

    def test_epoch_log_csv(self, tmp_path):
        path = tmp_path / "epochs.csv"
        write_epoch_log_csv(path, [EpochRecord(epoch=1, lr=0.1, train_loss=0.5, val_opacity_iou=float("nan"))])
        assert path.read_bytes() == b"epoch,lr,train_loss,val_opacity_iou\r\n1,0.1,0.5,nan\r\n"


class TestManifest:

    def test_hash_of_empty(self):
        assert config_hash(b"") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

    def test_write(self, tmp_path):
        manifest = RunManifest(command="fuse", inputs=["a.msk"], config_hash="x", seed=3, started_at=utc_now())
        path = write_manifest(tmp_path, manifest)
        assert path.name == "manifest.json"
        data = json.loads(path.read_text())
        assert data["command"] == "fuse" and data["seed"] == 3
        assert data["toolkit_version"] == "1.0.0"
        assert RunManifest(**data) == manifest


class TestOverlay:

    def test_tinting(self):
        slice_hu = np.array([[-1000, 350], [-1000, -1000]])
        groups = np.array([[0, 0], [2, -1]])
        pixels = np.asarray(render_overlay(slice_hu, groups))
        assert pixels.shape == (2, 2, 3) and pixels.dtype == np.uint8
        np.testing.assert_array_equal(pixels[0, 0], [0, 0, 0])
        np.testing.assert_array_equal(pixels[0, 1], [255, 255, 255])
        np.testing.assert_array_equal(pixels[1, 0], np.rint(0.45 * np.asarray(GROUPS[2].rgb)))
        np.testing.assert_array_equal(pixels[1, 1], [0, 0, 0])

    def test_window_clips(self):
        pixels = np.asarray(render_overlay(np.array([[-3000, 3000]]), np.zeros((1, 2), dtype=int)))
        np.testing.assert_array_equal(pixels[0, :, 0], [0, 255])

    def test_png_is_deterministic(self, tmp_path, phantom, taxonomy):
        volume, truth = phantom
        groups = taxonomy.groups_for(truth.labels)[1]
        save_overlay(tmp_path / "a.png", volume.voxels[1], groups)
        save_overlay(tmp_path / "b.png", volume.voxels[1], groups)
        data = (tmp_path / "a.png").read_bytes()
        assert data == (tmp_path / "b.png").read_bytes()
        image = Image.open(io.BytesIO(data))
        assert image.format == "PNG" and image.size == (32, 32)
