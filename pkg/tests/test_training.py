"""Tests for the training loop, model selection and the acceptance runs on phantoms."""
import math

import numpy as np
import pytest

from modules.errors import InvalidInputError, NumericalError
from modules.label_fusion import SoftLabel, fuse
from modules.losses import class_weights_from_soft
from modules.metrics import ConfusionAccumulator, iou, opacity_accumulator, opacity_from_probs, relative_volume
from modules.phantom import AnnotatorModel, generate, mild_confusion, random_phantom_spec, simulate_panel
from modules.preprocessing import volume_to_batch
from modules.segnet import SegNet, SegNetConfig, predict_probs
from modules.training import (
    EpochRecord,
    TrainConfig,
    TrainingData,
    evaluate_opacity_iou,
    select_best_epoch,
    train,
)

SMALL_NET = SegNetConfig(depth=2, base_channels=4)


def _truth_data(volume, truth):
    images = volume_to_batch(volume)
    soft = fuse([truth], by_group=True)
    return TrainingData.from_soft_labels(images, soft, images, soft.hard_labels())


def _log(scores):
    return [EpochRecord(epoch=k + 1, lr=0.1, train_loss=1.0, val_opacity_iou=s) for k, s in enumerate(scores)]


class TestSelectBestEpoch:

    def test_argmax(self):
        assert select_best_epoch(_log([0.2, 0.7, 0.5, 0.69])) == 2

    def test_earliest_tie(self):
        assert select_best_epoch(_log([0.5, 0.9, 0.9])) == 2

    def test_undefined_never_wins(self):
        assert select_best_epoch(_log([float("nan"), 0.1, float("nan")])) == 2

    def test_all_undefined(self):
        with pytest.warns(RuntimeWarning):
            assert select_best_epoch(_log([float("nan")] * 3)) == 3

    def test_random_logs(self, rng):
        for _ in range(100):
            scores = rng.integers(0, 5, size=8) / 4
            assert select_best_epoch(_log(scores.tolist())) == int(np.argmax(scores)) + 1

    def test_empty(self):
        assert select_best_epoch([]) == 0


class TestTrainingData:

    def test_shapes_checked(self, phantom):
        data = _truth_data(*phantom)
        with pytest.raises(InvalidInputError, match="Targets shape"):
            TrainingData(data.images, data.targets[:, :3], data.pixel_weights, data.supported,
                         data.val_images, data.val_labels)

    def test_empty_validation(self, phantom):
        data = _truth_data(*phantom)
        with pytest.raises(InvalidInputError, match="Validation set is empty"):
            TrainingData(data.images, data.targets, data.pixel_weights, data.supported,
                         data.val_images[:0], data.val_labels[:0])

    def test_confidence_weights_optional(self, phantom):
        volume, truth = phantom
        soft = fuse([truth], by_group=True)
        images = volume_to_batch(volume)
        data = TrainingData.from_soft_labels(images, soft, images, soft.hard_labels(), use_confidence_weights=False)
        np.testing.assert_array_equal(data.pixel_weights, soft.supported.astype(float))

    def test_rare_opacity_gets_the_largest_weights(self, phantom):
        data = _truth_data(*phantom)
        weights = class_weights_from_soft(data.targets, data.supported, data.group_ids).as_dict()
        assert weights[2] > 0.9
        assert weights[2] > weights[1] and weights[2] > weights[0]


class TestTrain:

    def test_zero_epochs(self, phantom):
        net = SegNet(SMALL_NET)
        initial = net.get_flat_params()
        result = train(net, _truth_data(*phantom), TrainConfig(epochs=0, network=SMALL_NET))
        assert result.log == [] and result.best_epoch == 0
        assert math.isnan(result.best_val_opacity_iou)
        np.testing.assert_array_equal(result.net.params, initial)

    def test_log_schedule_and_selection(self, phantom):
        data = _truth_data(*phantom)
        config = TrainConfig(epochs=4, batch_size=2, initial_lr=1e-2, decay_every_epochs=2, network=SMALL_NET)
        seen = []
        result = train(SegNet(SMALL_NET), data, config, on_epoch=seen.append)

        assert [r.epoch for r in result.log] == [1, 2, 3, 4]
        assert seen == result.log
        assert [r.lr for r in result.log] == [1e-2, 1e-2, 1e-3, 1e-3]
        assert result.best_epoch == select_best_epoch(result.log)
        assert result.best_val_opacity_iou == result.log[result.best_epoch - 1].val_opacity_iou

        rescored = evaluate_opacity_iou(
            result.net, data.val_images, data.val_labels, data.group_ids, batch_size=config.batch_size
        )
        assert rescored == result.best_val_opacity_iou

    def test_deterministic(self, phantom):
        data = _truth_data(*phantom)
        config = TrainConfig(epochs=2, batch_size=3, seed=5, network=SMALL_NET)
        a = train(SegNet(SMALL_NET), data, config)
        b = train(SegNet(SMALL_NET), data, config)
        assert np.array_equal(a.net.params, b.net.params)
        assert a.log == b.log

    def test_non_finite_loss_keeps_last_good(self, phantom):
        data = _truth_data(*phantom)
        data.pixel_weights = np.full_like(data.pixel_weights, np.nan)
        net = SegNet(SMALL_NET)
        initial = net.get_flat_params()
        with pytest.raises(NumericalError) as info:
            train(net, data, TrainConfig(epochs=2, network=SMALL_NET))
        np.testing.assert_array_equal(info.value.checkpoint, initial)
        assert info.value.epoch == 0


@pytest.mark.slow
class TestAcceptance:
    """Phantom-scale training runs."""

    def test_overfits_four_slices(self, make_spec):
        volume, truth = generate(make_spec(shape=(4, 64, 64), radius=8.0))
        data = _truth_data(volume, truth)
        net_config = SegNetConfig(depth=3, base_channels=8, seed=0)
        config = TrainConfig(
            epochs=200, batch_size=4, initial_lr=1e-2, decay_every_epochs=1000, network=net_config
        )
        result = train(SegNet(net_config), data, config)
        train_iou = evaluate_opacity_iou(result.net, data.images, data.val_labels, data.group_ids)
        assert train_iou >= 0.95

    def test_loss_decreases_early(self):
        decreasing = 0
        for seed in range(10):
            volume, truth = generate(random_phantom_spec(seed=seed, shape=(4, 32, 32), n_blobs=2, blob_radius_range=(3.0, 5.0)))
            net_config = SegNetConfig(depth=2, base_channels=8, seed=seed)
            config = TrainConfig(epochs=5, batch_size=2, seed=seed, network=net_config)
            log = train(SegNet(net_config), _truth_data(volume, truth), config).log
            decreasing += log[-1].train_loss < log[0].train_loss
        assert decreasing >= 9

    def test_generalizes_to_held_out_phantoms(self):
        annotator = AnnotatorModel(boundary_jitter_px=2.0, class_confusion=mild_confusion())

        def scan(seed):
            return generate(random_phantom_spec(seed=seed, shape=(8, 64, 64), n_blobs=3))

        train_images, train_soft = [], []
        for seed in range(5):
            volume, truth = scan(seed)
            train_images.append(volume_to_batch(volume))
            train_soft.append(fuse(simulate_panel(truth, annotator, 12, seed=100 + seed), by_group=True))
        images = np.concatenate(train_images)
        soft = SoftLabel(
            mean=np.concatenate([s.mean for s in train_soft]),
            std=np.concatenate([s.std for s in train_soft]),
            support=np.concatenate([s.support for s in train_soft]),
            n_annotators=12,
            classes=train_soft[0].classes,
        )
        val_volume, val_truth = scan(50)
        val_soft = fuse(simulate_panel(val_truth, annotator, 12, seed=150), by_group=True)
        data = TrainingData.from_soft_labels(images, soft, volume_to_batch(val_volume), val_soft.hard_labels())

        net_config = SegNetConfig(depth=3, base_channels=8, seed=1)
        config = TrainConfig(
            epochs=80, batch_size=4, initial_lr=1e-2, decay_every_epochs=60, network=net_config
        )
        net = train(SegNet(net_config), data, config).net

        acc = ConfusionAccumulator((0, 1))
        for seed in range(1000, 1010):
            volume, truth = scan(seed)
            probs = predict_probs(net, volume_to_batch(volume))
            gt = fuse([truth], by_group=True).hard_labels()
            opacity_accumulator(opacity_from_probs(probs, data.group_ids), gt, acc=acc)
        assert iou(acc, 1) >= 0.70
        assert 0.90 <= relative_volume(acc) <= 1.10
