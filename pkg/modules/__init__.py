"""
Pulmonary Opacity Segmentation - Core Modules
"""
from .errors import InvalidInputError, NumericalError, OpasegError, PipelineStateError, VolumeIOError
from .taxonomy import ClassTaxonomy, UNLABELLED
from .volume import CtVolume, LabelMask, class_to_group
from .preprocessing import NormalizedSlice, apply_lung_window, normalize
from .splitting import ScanSplit, split_scans
from .label_fusion import SoftLabel, average_annotation, fuse, gaussian_target
from .metrics import AgreementMatrix, ConfusionAccumulator, agreement, iou, opacity_iou, percent_wal, relative_volume
from .segnet import SegNet, SegNetConfig
from .losses import ClassWeights, compute_class_weights, kl_loss
from .optim import AdamState, adam_step
from .training import TrainConfig, TrainResult, train
from .phantom import AnnotatorModel, PhantomSpec, PhantomStudy, generate, simulate_annotator
from .reporting import RunManifest

__all__ = [
    "OpasegError",
    "InvalidInputError",
    "VolumeIOError",
    "NumericalError",
    "PipelineStateError",
    "ClassTaxonomy",
    "UNLABELLED",
    "CtVolume",
    "LabelMask",
    "class_to_group",
    "NormalizedSlice",
    "apply_lung_window",
    "normalize",
    "ScanSplit",
    "split_scans",
    "SoftLabel",
    "fuse",
    "average_annotation",
    "gaussian_target",
    "ConfusionAccumulator",
    "AgreementMatrix",
    "iou",
    "opacity_iou",
    "relative_volume",
    "percent_wal",
    "agreement",
    "SegNet",
    "SegNetConfig",
    "ClassWeights",
    "compute_class_weights",
    "kl_loss",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainResult",
    "train",
    "PhantomSpec",
    "AnnotatorModel",
    "PhantomStudy",
    "generate",
    "simulate_annotator",
    "RunManifest",
]
