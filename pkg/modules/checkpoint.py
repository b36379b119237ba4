"""
Checkpoints and Inference

A checkpoint is one file: a single line of JSON (architecture, epoch,
validation score) followed by the flat little-endian float64 parameters.
Predicted group probabilities are stored as float32 planes with a JSON
sidecar, like the other volume files.
"""
import json
import logging
import math
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from modules.errors import InvalidInputError, VolumeIOError
from modules.preprocessing import volume_to_batch
from modules.segnet import SegNet, SegNetConfig, predict_probs
from modules.volume import CtVolume
from modules.volume_io import (
    atomic_write_bytes,
    atomic_write_text,
    dump_json,
    read_header,
    read_payload,
    sidecar_path,
)

logger = logging.getLogger(__name__)

PARAM_DTYPE = np.dtype("<f8")
PROB_DTYPE = np.dtype("<f4")


def save_checkpoint(path: Union[str, Path], net: SegNet, epoch: int, val_score: float) -> None:
    header = {
        "architecture": net.config.model_dump(),
        "epoch": int(epoch),
        "val_opacity_iou": None if math.isnan(val_score) else float(val_score),
        "n_params": int(net.n_params),
        "dtype": "f8",
    }
    line = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    atomic_write_bytes(path, line + net.params.astype(PARAM_DTYPE).tobytes())
    logger.info("Saved checkpoint %s (epoch %d)", path, epoch)


def load_checkpoint(path: Union[str, Path]) -> Tuple[SegNet, dict]:
    """
    Rebuild a network from a checkpoint.

    Raises:
        VolumeIOError: Missing file, malformed header or wrong payload size
    """
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"Missing checkpoint: {path}")
    data = path.read_bytes()
    head, sep, payload = data.partition(b"\n")
    if not sep:
        raise VolumeIOError(f"Checkpoint {path} has no header line")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"Malformed checkpoint header in {path}: {e}") from e

    net = SegNet(SegNetConfig(**header["architecture"]))
    expected = net.n_params * PARAM_DTYPE.itemsize
    if len(payload) != expected or header.get("n_params") != net.n_params:
        raise VolumeIOError(
            f"Checkpoint {path} payload has {len(payload)} bytes, architecture needs {expected}"
        )
    net.set_flat_params(np.frombuffer(payload, dtype=PARAM_DTYPE))
    return net, header


def predict_volume(
    net: SegNet,
    volume: CtVolume,
    mean: float = None,
    std: float = None,
    window: Tuple[float, float] = None,
    batch_size: int = 8
) -> np.ndarray:
    """Group probabilities (depth, groups, height, width) for a CT volume."""
    images = volume_to_batch(volume, mean, std, window)
    return predict_probs(net, images, batch_size)


def save_probabilities(path: Union[str, Path], probs: np.ndarray, group_ids: Sequence[int]) -> None:
    """Write (depth, groups, height, width) probabilities as float32 with a sidecar."""
    depth, n_groups, height, width = probs.shape
    if n_groups != len(group_ids):
        raise InvalidInputError(f"{n_groups} probability planes for groups {list(group_ids)}")
    header = {
        "dtype": "f32",
        "groups": [int(g) for g in group_ids],
        "kind": "prob",
        "shape": [depth, height, width],
    }
    atomic_write_bytes(path, probs.astype(PROB_DTYPE).tobytes(order="C"))
    atomic_write_text(sidecar_path(path), dump_json(header))


def load_probabilities(path: Union[str, Path]) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Read probabilities written by save_probabilities.

    Values are renormalized per pixel in float64 to undo float32 rounding.
    """
    header = read_header(path)
    if header.get("kind") != "prob" or header.get("dtype") != "f32":
        raise VolumeIOError(f"{path} is not a probability file")
    groups = tuple(int(g) for g in header.get("groups", []))
    if not groups:
        raise VolumeIOError(f"{path}: header lists no groups")
    flat = read_payload(path, header, PROB_DTYPE, planes_per_voxel=len(groups))
    depth, height, width = header["shape"]
    probs = flat.reshape(depth, len(groups), height, width).astype(np.float64)
    total = probs.sum(axis=1, keepdims=True)
    if not np.isfinite(probs).all() or (probs < 0).any() or (total <= 0).any():
        raise InvalidInputError(f"{path} holds values that are not probabilities")
    return probs / total, groups
