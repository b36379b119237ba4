"""
Training Module

Minibatch Adam on the weighted KL loss with a step-decayed learning
rate. After every epoch the network is scored by binary opacity IOU on
the validation slices and the best-scoring epoch's parameters are kept.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from config import CONFIDENCE_EPSILON, KL_EPSILON, OPACITY_GROUPS
from modules.errors import InvalidInputError, NumericalError
from modules.label_fusion import SoftLabel, gaussian_target
from modules.losses import ClassWeights, class_weights_from_soft, kl_loss
from modules.metrics import UNDEFINED, iou, opacity_accumulator, opacity_from_probs
from modules.optim import AdamState, adam_step, step_decay_lr
from modules.segnet import SegNet, SegNetConfig, predict_probs

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    """
    Training hyper-parameters.

    Defaults are desk-scale (small CPU batches); TrainConfig.published()
    gives the published recipe: 30 epochs, batch 64, lr 0.1 divided by
    10 every 10 epochs.
    """
    epochs: int = Field(30, ge=0, description="Number of epochs")
    batch_size: int = Field(8, ge=1, description="Slices per minibatch")
    initial_lr: float = Field(1e-2, gt=0, description="Learning rate for the first epochs")
    decay_factor: float = Field(10.0, gt=0, description="Divisor applied to the rate at each decay")
    decay_every_epochs: int = Field(10, ge=1, description="Epochs between decays")
    seed: int = Field(0, description="Shuffle seed")
    epsilon_kl: float = Field(KL_EPSILON, gt=0, description="Epsilon inside the KL log")
    confidence_epsilon: float = Field(CONFIDENCE_EPSILON, gt=0, description="Epsilon of the confidence weight")
    use_confidence_weights: bool = Field(True, description="Weight pixels by inverse annotator variance")
    val_fraction: float = Field(0.2, gt=0, lt=1, description="Share of non-test scans used for validation")
    test_ids: List[str] = Field(default_factory=list, description="Scans held out from training")
    opacity_groups: Tuple[int, ...] = Field(OPACITY_GROUPS, description="Groups scored as opacity during validation")
    network: SegNetConfig = Field(default_factory=SegNetConfig, description="Architecture")

    @classmethod
    def published(cls, **overrides) -> "TrainConfig":
        values = dict(epochs=30, batch_size=64, initial_lr=0.1, decay_factor=10.0, decay_every_epochs=10)
        values.update(overrides)
        return cls(**values)

    def lr_for_epoch(self, epoch: int) -> float:
        return step_decay_lr(epoch, self.initial_lr, self.decay_factor, self.decay_every_epochs)


@dataclass
class TrainingData:
    """
    Training and validation slices.

    images: (N, H, W) normalized slices
    targets: (N, C, H, W) target distributions, zero where unsupported
    pixel_weights: (N, H, W) confidence weights
    supported: (N, H, W) pixels that carry a target
    val_images: (M, H, W) normalized slices
    val_labels: (M, H, W) group labels, -1 where unlabelled
    """
    images: np.ndarray
    targets: np.ndarray
    pixel_weights: np.ndarray
    supported: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    group_ids: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        n = len(self.images)
        spatial = self.images.shape[1:]
        if self.targets.shape != (n, len(self.group_ids)) + spatial:
            raise InvalidInputError(
                f"Targets shape {self.targets.shape} does not match {n} slices of {spatial} "
                f"over {len(self.group_ids)} groups"
            )
        for name in ("pixel_weights", "supported"):
            if getattr(self, name).shape != (n,) + spatial:
                raise InvalidInputError(f"{name} shape {getattr(self, name).shape} != {(n,) + spatial}")
        if len(self.val_images) == 0:
            raise InvalidInputError("Validation set is empty")
        if self.val_images.shape != self.val_labels.shape or self.val_images.shape[1:] != spatial:
            raise InvalidInputError(
                f"Validation images {self.val_images.shape} and labels {self.val_labels.shape} "
                f"must share the training slice size {spatial}"
            )

    @classmethod
    def from_soft_labels(
        cls,
        images: np.ndarray,
        soft: SoftLabel,
        val_images: np.ndarray,
        val_labels: np.ndarray,
        use_confidence_weights: bool = True,
        confidence_epsilon: float = None
    ) -> "TrainingData":
        """Build targets and pixel weights from group-level fused labels."""
        gaussian = gaussian_target(soft, confidence_epsilon)
        supported = soft.supported
        weights = gaussian.weight if use_confidence_weights else supported.astype(np.float64)
        return cls(
            images=np.asarray(images, dtype=np.float64),
            targets=gaussian.target,
            pixel_weights=weights,
            supported=supported,
            val_images=np.asarray(val_images, dtype=np.float64),
            val_labels=np.asarray(val_labels),
            group_ids=tuple(soft.classes),
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_opacity_iou: float


@dataclass
class TrainResult:
    """Trained network (best epoch's parameters) and the per-epoch log."""
    net: SegNet
    log: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_opacity_iou: float = UNDEFINED


def evaluate_opacity_iou(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    group_ids: Sequence[int] = (0, 1, 2, 3, 4),
    opacity_groups: Tuple[int, ...] = None,
    batch_size: int = 8
) -> float:
    """Binary opacity IOU (summed group mass rule) over a set of slices."""
    probs = predict_probs(net, images, batch_size)
    pred = opacity_from_probs(probs, group_ids, opacity_groups or OPACITY_GROUPS)
    return iou(opacity_accumulator(pred, labels, opacity_groups or OPACITY_GROUPS), 1)


def select_best_epoch(log: Sequence[EpochRecord]) -> int:
    """
    Epoch number with the highest validation opacity IOU.

    Undefined scores never win; the earliest epoch wins a tie. When no
    epoch has a defined score the last epoch is returned.
    """
    if not log:
        return 0
    scores = [r.val_opacity_iou for r in log]
    defined = [i for i, s in enumerate(scores) if not math.isnan(s)]
    if not defined:
        message = "Validation opacity IOU undefined for every epoch; keeping the last epoch"
        logger.warning(message)
        warnings.warn(message, RuntimeWarning, stacklevel=2)
        return log[-1].epoch
    best = max(defined, key=lambda i: (scores[i], -i))
    return log[best].epoch


def train(
    net: SegNet,
    data: TrainingData,
    config: TrainConfig = None,
    class_weights: ClassWeights = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None
) -> TrainResult:
    """
    Train a network and keep its best-validation parameters.

    Args:
        net: Network to train (modified in place)
        data: Training and validation slices
        config: Hyper-parameters
        class_weights: Per-group loss weights; computed from the soft
            targets when omitted
        on_epoch: Called with each epoch's record

    Returns:
        TrainResult whose net holds the best epoch's parameters

    Raises:
        NumericalError: On a non-finite loss or gradient; carries the
            last good parameters
    """
    config = config or TrainConfig()
    if class_weights is None:
        class_weights = class_weights_from_soft(data.targets, data.supported, data.group_ids)
    logger.info("Class weights: %s", class_weights.as_dict())

    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(net.n_params)
    last_good = net.get_flat_params()
    best_params = None
    best_seen = -math.inf
    log: List[EpochRecord] = []
    n = len(data.images)

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_for_epoch(epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        pixel_sum = 0

        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            probs = net.forward(data.images[idx])
            loss, grad_logits = kl_loss(
                probs,
                data.targets[idx],
                class_weights,
                data.pixel_weights[idx],
                config.epsilon_kl,
                data.supported[idx],
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"Non-finite loss at epoch {epoch}", checkpoint=last_good, epoch=epoch - 1
                )
            grads = net.backward(grad_logits)
            try:
                params, state = adam_step(net.params, grads, state, lr)
            except NumericalError as e:
                raise NumericalError(str(e), checkpoint=last_good, epoch=epoch - 1) from e
            net.set_flat_params(params)

            n_supported = int(data.supported[idx].sum())
            loss_sum += loss * n_supported
            pixel_sum += n_supported

        train_loss = loss_sum / pixel_sum if pixel_sum else 0.0
        val_iou = evaluate_opacity_iou(
            net, data.val_images, data.val_labels, data.group_ids, config.opacity_groups, config.batch_size
        )
        record = EpochRecord(epoch=epoch, lr=lr, train_loss=train_loss, val_opacity_iou=val_iou)
        log.append(record)
        last_good = net.get_flat_params()
        if not math.isnan(val_iou) and val_iou > best_seen:
            best_seen = val_iou
            best_params = last_good

        logger.info(
            "epoch %d lr %.3g train_loss %.5f val_opacity_iou %.4f", epoch, lr, train_loss, val_iou
        )
        if on_epoch:
            on_epoch(record)

    best_epoch = select_best_epoch(log)
    best_score = UNDEFINED
    if best_epoch:
        # With no defined score the last epoch is kept as trained
        if best_params is not None:
            net.set_flat_params(best_params)
        best_score = log[best_epoch - 1].val_opacity_iou
        logger.info("Selected epoch %d (val opacity IOU %.4f)", best_epoch, best_score)

    return TrainResult(net=net, log=log, best_epoch=best_epoch, best_val_opacity_iou=best_score)
