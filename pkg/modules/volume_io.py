"""
Volume File I/O

Flat little-endian payloads with a JSON sidecar header:

    scan.ctv        int16 HU voxels, z-y-x order
    scan.ctv.json   {"shape", "spacing_mm", "dtype": "i16", "kind": "ct"}
    mask.msk        uint8 class IDs stored as id + 1 (so -1 -> 0)
    mask.msk.json   {"shape", "spacing_mm", "dtype": "u8+offset", "kind": "mask"}

Every write goes to a temporary file first and is renamed into place.
"""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from modules.errors import InvalidInputError, VolumeIOError
from modules.taxonomy import ClassTaxonomy
from modules.volume import CtVolume, LabelMask

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CT_DTYPE = np.dtype("<i2")
MASK_DTYPE = np.dtype("u1")


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write bytes via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    """Stable JSON text used for every sidecar and manifest."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_header(path: PathLike) -> dict:
    """
    Read and parse the JSON sidecar of a payload file.

    Raises:
        VolumeIOError: If the sidecar is missing or not valid JSON
    """
    header_path = sidecar_path(path)
    if not header_path.exists():
        raise VolumeIOError(f"Missing header: {header_path}")
    try:
        return json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise VolumeIOError(f"Malformed header {header_path}: {e}") from e


def read_payload(path: PathLike, header: dict, dtype: np.dtype, planes_per_voxel: int = 1) -> np.ndarray:
    """
    Read a payload and check its byte length against the header shape.

    Raises:
        VolumeIOError: On a missing file, bad shape or length mismatch
    """
    path = Path(path)
    shape = header.get("shape")
    if not isinstance(shape, list) or len(shape) != 3 or any(
        not isinstance(s, int) or s < 1 for s in shape
    ):
        raise VolumeIOError(f"Header of {path} has invalid shape: {shape}")
    if not path.exists():
        raise VolumeIOError(f"Missing payload: {path}")

    data = path.read_bytes()
    expected = int(np.prod(shape)) * planes_per_voxel * dtype.itemsize
    if len(data) != expected:
        raise VolumeIOError(
            f"Payload {path} has {len(data)} bytes, header shape {tuple(shape)} "
            f"needs {expected}"
        )
    return np.frombuffer(data, dtype=dtype)


def _check_kind(path: PathLike, header: dict, kind: str, dtype: str) -> None:
    if header.get("kind") != kind or header.get("dtype") != dtype:
        raise VolumeIOError(
            f"{path} is kind={header.get('kind')!r} dtype={header.get('dtype')!r}, "
            f"expected kind={kind!r} dtype={dtype!r}"
        )


def _spacing(header: dict, path: PathLike):
    spacing = header.get("spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeIOError(f"Header of {path} has invalid spacing_mm: {spacing}")
    return tuple(float(s) for s in spacing)


def save_volume(path: PathLike, volume: CtVolume) -> None:
    """Write a CT volume and its sidecar."""
    header = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "dtype": "i16",
        "kind": "ct",
    }
    atomic_write_bytes(path, volume.voxels.astype(CT_DTYPE).tobytes(order="C"))
    atomic_write_text(sidecar_path(path), dump_json(header))
    logger.debug("Wrote CT volume %s shape=%s", path, volume.shape)


def load_volume(path: PathLike) -> CtVolume:
    """Read a CT volume written by save_volume."""
    header = read_header(path)
    _check_kind(path, header, "ct", "i16")
    voxels = read_payload(path, header, CT_DTYPE).reshape(header["shape"])
    try:
        return CtVolume(voxels=voxels.astype(np.int16), spacing_mm=_spacing(header, path))
    except InvalidInputError as e:
        raise VolumeIOError(f"{path}: {e}") from e


def save_mask(path: PathLike, mask: LabelMask) -> None:
    """Write a label mask (class IDs offset by one) and its sidecar."""
    header = {
        "shape": list(mask.shape),
        "spacing_mm": list(mask.spacing_mm),
        "dtype": "u8+offset",
        "kind": "mask",
    }
    stored = (mask.labels.astype(np.int16) + 1).astype(MASK_DTYPE)
    atomic_write_bytes(path, stored.tobytes(order="C"))
    atomic_write_text(sidecar_path(path), dump_json(header))
    logger.debug("Wrote mask %s annotator=%s", path, mask.annotator_id)


def load_mask(path: PathLike, taxonomy: ClassTaxonomy = None, annotator_id: str = None) -> LabelMask:
    """
    Read a label mask written by save_mask.

    The annotator ID defaults to the file stem; labelled slices are the
    slices holding any value other than Unlabelled.

    Raises:
        VolumeIOError: On header/payload problems
        InvalidInputError: If a stored value is not a class ID
    """
    header = read_header(path)
    _check_kind(path, header, "mask", "u8+offset")
    stored = read_payload(path, header, MASK_DTYPE).reshape(header["shape"])
    labels = stored.astype(np.int16) - 1
    return LabelMask(
        labels=labels,
        annotator_id=annotator_id or Path(path).stem,
        spacing_mm=_spacing(header, path),
        taxonomy=taxonomy,
    )
