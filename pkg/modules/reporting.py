"""
Reporting Module

Run manifests, RFC-4180 CSV reports and PNG overlays. Every file is
written atomically.
"""
import csv
import hashlib
import io
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field

from config import LUNG_WINDOW_HIGH_HU, LUNG_WINDOW_LOW_HU, TOOLKIT_VERSION
from modules.metrics import AgreementMatrix
from modules.taxonomy import GROUPS
from modules.training import EpochRecord
from modules.volume_io import atomic_write_bytes, atomic_write_text, dump_json

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"

# Groups drawn on overlays; background and unlabelled stay greyscale
OVERLAY_GROUPS = (1, 2, 3, 4)
OVERLAY_ALPHA = 0.45


class RunManifest(BaseModel):
    """Provenance record written next to every command's outputs."""
    command: str = Field(..., description="Command name")
    inputs: List[str] = Field(default_factory=list, description="Input paths")
    config_hash: str = Field(..., description="SHA-256 of the configuration bytes")
    seed: Optional[int] = Field(None, description="Seed used by the command")
    toolkit_version: str = Field(TOOLKIT_VERSION, description="Toolkit version")
    started_at: str = Field(..., description="UTC start time, ISO 8601")
    finished_at: Optional[str] = Field(None, description="UTC finish time, ISO 8601")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_hash(config_bytes: bytes) -> str:
    return hashlib.sha256(config_bytes).hexdigest()


def write_manifest(out_dir: PathLike, manifest: RunManifest) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    atomic_write_text(path, dump_json(manifest.model_dump()))
    return path


def format_value(value: float) -> str:
    """Shortest round-tripping text for a metric value."""
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return repr(float(value))


def _csv_text(rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerows(rows)
    return buffer.getvalue()


def write_metrics_csv(path: PathLike, rows: Iterable[Tuple[str, str, str, float]]) -> None:
    """One row per (scan, metric, target, value)."""
    body = [("scan", "metric", "target", "value")]
    body += [(scan, metric, target, format_value(value)) for scan, metric, target, value in rows]
    atomic_write_text(path, _csv_text(body))


def write_agreement_csv(path: PathLike, matrix: AgreementMatrix) -> None:
    """Pairwise opacity IOU with annotator IDs as headers, plus vs_average."""
    ids = list(matrix.annotator_ids)
    body = [["annotator"] + ids + ["vs_average"]]
    for i, annotator in enumerate(ids):
        row = [format_value(v) for v in matrix.pairwise[i]]
        body.append([annotator] + row + [format_value(matrix.vs_average[i])])
    atomic_write_text(path, _csv_text(body))


def write_epoch_log_csv(path: PathLike, log: Sequence[EpochRecord]) -> None:
    body = [("epoch", "lr", "train_loss", "val_opacity_iou")]
    body += [
        (r.epoch, format_value(r.lr), format_value(r.train_loss), format_value(r.val_opacity_iou))
        for r in log
    ]
    atomic_write_text(path, _csv_text(body))


def render_overlay(
    slice_hu: np.ndarray,
    groups: np.ndarray,
    window: Tuple[int, int] = (LUNG_WINDOW_LOW_HU, LUNG_WINDOW_HIGH_HU)
) -> Image.Image:
    """Windowed greyscale slice with lung and opacity groups tinted."""
    low, high = window
    grey = (np.clip(slice_hu, low, high) - low) / (high - low)
    rgb = np.repeat(grey[..., np.newaxis] * 255.0, 3, axis=2)
    for group in OVERLAY_GROUPS:
        where = groups == group
        colour = np.asarray(GROUPS[group].rgb, dtype=np.float64)
        rgb[where] = (1 - OVERLAY_ALPHA) * rgb[where] + OVERLAY_ALPHA * colour
    return Image.fromarray(np.rint(rgb).astype(np.uint8), mode="RGB")


def save_overlay(path: PathLike, slice_hu: np.ndarray, groups: np.ndarray) -> None:
    buffer = io.BytesIO()
    render_overlay(slice_hu, groups).save(buffer, format="PNG")
    atomic_write_bytes(path, buffer.getvalue())
