import json

import numpy as np
import pytest

from modules.checkpoint import (
    load_checkpoint,
    load_probabilities,
    predict_volume,
    save_checkpoint,
    save_probabilities,
)
from modules.errors import InvalidInputError, VolumeIOError
from modules.preprocessing import volume_to_batch
from modules.segnet import SegNet, SegNetConfig, predict_probs

SMALL_NET = SegNetConfig(depth=2, base_channels=4, seed=3)


class TestCheckpoint:

    def test_round_trip(self, tmp_path):
        net = SegNet(SMALL_NET)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, epoch=7, val_score=0.625)

        loaded, header = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.params, net.params)
        assert loaded.config == net.config
        assert header["epoch"] == 7
        assert header["val_opacity_iou"] == 0.625

    def test_undefined_score_is_null(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, SegNet(SMALL_NET), epoch=0, val_score=float("nan"))
        header = json.loads(path.read_bytes().partition(b"\n")[0])
        assert header["val_opacity_iou"] is None

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, SegNet(SMALL_NET), epoch=1, val_score=0.5)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(VolumeIOError, match="payload"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(VolumeIOError, match="Missing checkpoint"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"not json\n\x00\x01")
        with pytest.raises(VolumeIOError, match="Malformed"):
            load_checkpoint(path)

    def test_predictions_survive_reload(self, tmp_path, phantom):
        volume, _ = phantom
        net = SegNet(SMALL_NET)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, epoch=1, val_score=0.5)
        loaded, _ = load_checkpoint(path)
        np.testing.assert_array_equal(predict_volume(loaded, volume), predict_volume(net, volume))
        np.testing.assert_array_equal(
            predict_volume(net, volume), predict_probs(net, volume_to_batch(volume))
        )


class TestProbabilities:

    def test_round_trip(self, tmp_path, phantom):
        volume, _ = phantom
        probs = predict_volume(SegNet(SMALL_NET), volume)
        path = tmp_path / "probs.prob"
        save_probabilities(path, probs, (0, 1, 2, 3, 4))

        loaded, groups = load_probabilities(path)
        assert groups == (0, 1, 2, 3, 4)
        assert loaded.shape == probs.shape and loaded.dtype == np.float64
        np.testing.assert_allclose(loaded, probs, atol=1e-6)
        np.testing.assert_allclose(loaded.sum(axis=1), 1.0, atol=1e-12)

        sidecar = json.loads((tmp_path / "probs.prob.json").read_text())
        assert sidecar["kind"] == "prob" and sidecar["shape"] == list(volume.shape)

    def test_group_count_must_match(self, tmp_path):
        with pytest.raises(InvalidInputError):
            save_probabilities(tmp_path / "p.prob", np.full((1, 2, 2, 2), 0.5), (0, 1, 2))

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "p.prob"
        save_probabilities(path, np.full((1, 2, 2, 2), 0.5), (0, 1))
        sidecar = tmp_path / "p.prob.json"
        sidecar.write_text(sidecar.read_text().replace('"prob"', '"mask"'))
        with pytest.raises(VolumeIOError, match="not a probability file"):
            load_probabilities(path)

    def test_negative_values(self, tmp_path):
        path = tmp_path / "p.prob"
        probs = np.full((1, 2, 2, 2), 0.5)
        probs[0, 0, 0, 0] = -0.5
        save_probabilities(path, probs, (0, 1))
        with pytest.raises(InvalidInputError):
            load_probabilities(path)
