"""
Phantom Module

Synthetic chest CT volumes with known opacity geometry, and simulated
annotators whose labels differ from the truth the way radiologists'
labels differ from each other: smooth boundary displacement, whole-region
pattern confusion, omitted regions and partially labelled studies.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import ndimage

from config import HU_MAX, HU_MIN, N_ANNOTATORS
from modules.errors import InvalidInputError
from modules.taxonomy import ClassTaxonomy, REPRESENTATIVE_CLASS
from modules.volume import CtVolume, LabelMask

logger = logging.getLogger(__name__)

# Typical attenuation drawn for random blobs of each group (HU)
GROUP_HU_RANGES = {2: (-600, -450), 3: (-450, -300), 4: (0, 100)}

LUNG_CLASSES = (1, 2)

# Rows and columns of AnnotatorModel.class_confusion
CONFUSION_GROUPS = (2, 3, 4)


class BlobSpec(BaseModel):
    """An ellipsoidal opacity region."""
    center: Tuple[float, float, float] = Field(..., description="Center (z, y, x) in voxels")
    radii: Tuple[float, float, float] = Field(..., description="Semi-axes (z, y, x) in voxels")
    group: int = Field(..., description="Opacity group 2, 3 or 4")
    intensity_hu: int = Field(..., description="Attenuation inside the blob")
    class_id: Optional[int] = Field(None, description="Class within the group; representative class if omitted")

    @field_validator("group")
    @classmethod
    def _opacity_group(cls, v):
        if v not in (2, 3, 4):
            raise ValueError(f"blob group must be 2, 3 or 4, got {v}")
        return v

    @field_validator("radii")
    @classmethod
    def _positive_radii(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError(f"blob radii must be positive, got {v}")
        return v

    @field_validator("intensity_hu")
    @classmethod
    def _plausible_hu(cls, v):
        if not HU_MIN <= v <= HU_MAX:
            raise ValueError(f"intensity {v} HU outside [{HU_MIN}, {HU_MAX}]")
        return v

    @model_validator(mode="after")
    def _class_in_group(self):
        if self.class_id is not None and ClassTaxonomy().group_of(self.class_id) != self.group:
            raise ValueError(f"class {self.class_id} is not in group {self.group}")
        return self

    @property
    def resolved_class(self) -> int:
        return self.class_id if self.class_id is not None else REPRESENTATIVE_CLASS[self.group]


class PhantomSpec(BaseModel):
    """Geometry and attenuation of a synthetic chest volume."""
    shape: Tuple[int, int, int] = Field((16, 64, 64), description="(depth, height, width)")
    n_lung_ellipses: int = Field(2, ge=1, le=2, description="One central or two lateral lungs")
    blobs: List[BlobSpec] = Field(default_factory=list, description="Explicit opacity blobs")
    n_random_blobs: int = Field(0, ge=0, description="Blobs drawn at random when none are listed")
    blob_radius_range: Tuple[float, float] = Field((4.0, 9.0), description="In-plane radius range of random blobs")
    background_hu: int = Field(-100, description="Chest wall / mediastinum")
    air_hu: int = Field(-1000, description="Outside the body")
    lung_hu_range: Tuple[int, int] = Field((-850, -650), description="Aerated lung")
    noise_std_hu: float = Field(15.0, ge=0, description="Gaussian noise")
    spacing_mm: Tuple[float, float, float] = Field((5.0, 1.0, 1.0), description="Voxel spacing (z, y, x)")
    seed: int = Field(0, description="Generation seed")

    @field_validator("shape")
    @classmethod
    def _positive_shape(cls, v):
        if any(s < 1 for s in v):
            raise ValueError(f"shape must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _plausible(self):
        for name in ("background_hu", "air_hu"):
            value = getattr(self, name)
            if not HU_MIN <= value <= HU_MAX:
                raise ValueError(f"{name}={value} outside [{HU_MIN}, {HU_MAX}]")
        low, high = self.lung_hu_range
        if not HU_MIN <= low < high <= HU_MAX:
            raise ValueError(f"lung_hu_range {self.lung_hu_range} must be increasing within CT range")
        r_low, r_high = self.blob_radius_range
        if not 0 < r_low <= r_high:
            raise ValueError(f"blob_radius_range {self.blob_radius_range} must be positive and increasing")
        return self


class AnnotatorModel(BaseModel):
    """How a simulated annotator deviates from the truth."""
    boundary_jitter_px: float = Field(0.0, ge=0, description="Peak boundary displacement")
    jitter_smoothness_px: float = Field(8.0, gt=0, description="Correlation length of the displacement field")
    class_confusion: List[List[float]] = Field(
        default_factory=lambda: np.eye(3).tolist(),
        description="Row-stochastic matrix over groups 2, 3, 4"
    )
    omission_rate: float = Field(0.0, ge=0, le=1, description="Chance a whole region is missed")
    slice_coverage: float = Field(1.0, gt=0, le=1, description="Fraction of slices labelled")
    seed: int = Field(0, description="Annotator seed")

    @field_validator("class_confusion")
    @classmethod
    def _row_stochastic(cls, v):
        m = np.asarray(v, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"class_confusion must be 3x3, got shape {m.shape}")
        if (m < 0).any() or np.abs(m.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("class_confusion rows must be non-negative and sum to 1")
        return v


def mild_confusion(strength: float = 0.1) -> List[List[float]]:
    """Confusion mostly between neighbouring opacity groups."""
    s = strength
    return [[1 - s, s, 0.0], [s / 2, 1 - s, s / 2], [0.0, s, 1 - s]]


class PhantomStudy(BaseModel):
    """A simulated multi-annotator study: a scan template and an annotator panel."""
    phantom: PhantomSpec = Field(default_factory=lambda: PhantomSpec(n_random_blobs=3), description="Scan template")
    annotator: AnnotatorModel = Field(
        default_factory=lambda: AnnotatorModel(boundary_jitter_px=2.0, class_confusion=mild_confusion()),
        description="Model shared by every simulated annotator"
    )
    n_scans: int = Field(2, ge=1, description="Scans in the cohort; training needs at least two")
    n_annotators: int = Field(N_ANNOTATORS, ge=1, description="Annotators per scan")


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    y, x = np.ogrid[:h, :w]
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def body_mask(h: int, w: int) -> np.ndarray:
    return _ellipse(h, w, (h - 1) / 2, (w - 1) / 2, 0.46 * h, 0.48 * w)


def lung_ellipses(spec: PhantomSpec) -> List[Tuple[float, float, float, float, int]]:
    """
    Lung cross-sections as (cy, cx, ry, rx, class_id).

    With two lungs the right lung (class 2) is on the image left, as in
    radiological display.
    """
    _, h, w = spec.shape
    cy = (h - 1) / 2
    if spec.n_lung_ellipses == 1:
        return [(cy, (w - 1) / 2, 0.36 * h, 0.40 * w, 1)]
    return [
        (cy, 0.28 * (w - 1), 0.36 * h, 0.20 * w, 2),
        (cy, 0.72 * (w - 1), 0.36 * h, 0.20 * w, 1),
    ]


def lung_labels(spec: PhantomSpec) -> np.ndarray:
    """(h, w) map of lung class per pixel, 0 outside the lungs."""
    _, h, w = spec.shape
    out = np.zeros((h, w), dtype=np.int8)
    for cy, cx, ry, rx, class_id in lung_ellipses(spec):
        out[_ellipse(h, w, cy, cx, ry, rx)] = class_id
    return out


def blob_mask(shape: Tuple[int, int, int], blob: BlobSpec) -> np.ndarray:
    d, h, w = shape
    z, y, x = np.ogrid[:d, :h, :w]
    (cz, cy, cx), (rz, ry, rx) = blob.center, blob.radii
    return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def draw_blobs(spec: PhantomSpec, rng: np.random.Generator, attempts: int = 200) -> List[BlobSpec]:
    """Random blobs that lie inside the lungs, rejection-sampled."""
    d, h, w = spec.shape
    lungs = np.broadcast_to(lung_labels(spec) > 0, spec.shape)
    ellipses = lung_ellipses(spec)
    blobs = []
    for k in range(spec.n_random_blobs):
        for _ in range(attempts):
            cy, cx, ry, rx, _lung_class = ellipses[rng.integers(len(ellipses))]
            r = rng.uniform(*spec.blob_radius_range)
            if r >= min(ry, rx):
                continue
            angle = rng.uniform(0, 2 * np.pi)
            rho = np.sqrt(rng.uniform())
            center_y = cy + rho * (ry - r) * np.sin(angle)
            center_x = cx + rho * (rx - r) * np.cos(angle)
            center_z = rng.uniform(0, d - 1) if d > 1 else 0.0
            rz = max(1.0, rng.uniform(0.25, 0.5) * d)
            group = int(rng.choice(CONFUSION_GROUPS))
            low, high = GROUP_HU_RANGES[group]
            blob = BlobSpec(
                center=(float(center_z), float(center_y), float(center_x)),
                radii=(float(rz), float(r), float(r)),
                group=group,
                intensity_hu=int(rng.integers(low, high + 1)),
            )
            voxels = blob_mask(spec.shape, blob)
            if voxels.any() and not (voxels & ~lungs).any():
                blobs.append(blob)
                break
        else:
            raise InvalidInputError(f"Could not place random blob {k} inside the lungs")
    return blobs


def random_phantom_spec(
    seed: int,
    shape: Tuple[int, int, int] = (16, 64, 64),
    n_blobs: int = 3,
    **overrides
) -> PhantomSpec:
    """A spec with n_blobs explicit random blobs."""
    template = PhantomSpec(shape=shape, n_random_blobs=n_blobs, seed=seed, **overrides)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    blobs = draw_blobs(template, rng)
    return template.model_copy(update={"blobs": blobs, "n_random_blobs": 0})


def _smooth_field(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def generate(spec: PhantomSpec, taxonomy: ClassTaxonomy = None) -> Tuple[CtVolume, LabelMask]:
    """
    Render a phantom volume and its exact class-level truth mask.

    Raises:
        InvalidInputError: If a blob extends outside the lungs
    """
    taxonomy = taxonomy or ClassTaxonomy()
    d, h, w = spec.shape
    rng = np.random.default_rng(spec.seed)

    blobs = list(spec.blobs)
    if not blobs and spec.n_random_blobs:
        blobs = draw_blobs(spec, np.random.default_rng(np.random.SeedSequence([spec.seed, 1])))

    labels = np.zeros(spec.shape, dtype=np.int8)
    hu = np.full(spec.shape, float(spec.air_hu))
    hu[:, body_mask(h, w)] = spec.background_hu

    lungs2d = lung_labels(spec)
    lungs = np.broadcast_to(lungs2d > 0, spec.shape)
    labels[:, lungs2d > 0] = lungs2d[lungs2d > 0]

    low, high = spec.lung_hu_range
    center, half = (low + high) / 2, (high - low) / 2
    texture = np.stack([_smooth_field(rng, (h, w), 4.0) for _ in range(d)])
    hu[lungs] = (center + 0.5 * half * texture)[lungs]

    for k, blob in enumerate(blobs):
        voxels = blob_mask(spec.shape, blob)
        if (voxels & ~lungs).any():
            raise InvalidInputError(
                f"Blob {k} centered at {blob.center} with radii {blob.radii} lies outside the lungs"
            )
        labels[voxels] = blob.resolved_class
        hu[voxels] = blob.intensity_hu

    if spec.noise_std_hu > 0:
        hu = hu + rng.normal(0.0, spec.noise_std_hu, size=spec.shape)
    voxels = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)

    logger.debug("Generated phantom seed=%d with %d blobs", spec.seed, len(blobs))
    volume = CtVolume(voxels=voxels, spacing_mm=spec.spacing_mm)
    truth = LabelMask(labels=labels, annotator_id="truth", spacing_mm=spec.spacing_mm, taxonomy=taxonomy)
    return volume, truth


def _opacity_regions(labels: np.ndarray, opacity_classes: Sequence[int]):
    """Connected regions of each opacity class, numbered from 1."""
    regions = np.zeros(labels.shape, dtype=np.int32)
    region_class = [0]
    for c in sorted(opacity_classes):
        found, n = ndimage.label(labels == c)
        if n:
            regions[found > 0] = found[found > 0] + len(region_class) - 1
            region_class.extend([c] * n)
    return regions, region_class


def simulate_annotator(
    truth: LabelMask,
    model: AnnotatorModel,
    taxonomy: ClassTaxonomy = None,
    annotator_id: str = None
) -> LabelMask:
    """
    Simulate one annotator labelling the truth.

    Each opacity region keeps or changes its group according to the
    confusion row of its true group, and is dropped with probability
    omission_rate. Region boundaries are then displaced per slice by a
    smooth random field with peak amplitude boundary_jitter_px. Opacity
    only ever replaces lung; background labels are never changed.
    """
    taxonomy = taxonomy or truth.taxonomy
    rng = np.random.default_rng(model.seed)
    labels = truth.labels.astype(np.int16)
    groups = taxonomy.groups_for(labels)
    opacity = np.isin(groups, CONFUSION_GROUPS)
    confusion = np.asarray(model.class_confusion, dtype=np.float64)

    # What lies beneath each opacity voxel: the nearest non-opacity label
    underlay = labels
    if opacity.any() and not opacity.all():
        indices = ndimage.distance_transform_edt(opacity, return_distances=False, return_indices=True)
        underlay = labels[tuple(indices)]

    regions, region_class = _opacity_regions(labels, taxonomy.opacity_class_ids(CONFUSION_GROUPS))
    assigned = np.zeros(len(region_class), dtype=np.int16)
    for r in range(1, len(region_class)):
        old_class = region_class[r]
        old_group = taxonomy.group_of(old_class)
        dropped = rng.random() < model.omission_rate
        new_group = int(rng.choice(CONFUSION_GROUPS, p=confusion[CONFUSION_GROUPS.index(old_group)]))
        if dropped:
            continue
        assigned[r] = old_class if new_group == old_group else REPRESENTATIVE_CLASS[new_group]

    d, h, w = truth.shape
    warped = regions
    if model.boundary_jitter_px > 0:
        warped = np.empty_like(regions)
        yy, xx = np.mgrid[:h, :w].astype(np.float64)
        for z in range(d):
            dy = _smooth_field(rng, (h, w), model.jitter_smoothness_px) * model.boundary_jitter_px
            dx = _smooth_field(rng, (h, w), model.jitter_smoothness_px) * model.boundary_jitter_px
            warped[z] = ndimage.map_coordinates(regions[z], [yy + dy, xx + dx], order=0, mode="nearest")

    allowed = np.isin(underlay, LUNG_CLASSES) | opacity
    out = np.where(opacity, underlay, labels)
    # assigned[0] == 0, and dropped regions are 0 too
    place = allowed & (assigned[warped] > 0)
    out[place] = assigned[warped[place]]

    labelled_slices = set(truth.labelled_slices)
    if model.slice_coverage < 1.0:
        n_keep = max(1, int(np.floor(model.slice_coverage * d + 0.5)))
        keep = set(int(z) for z in rng.choice(d, size=n_keep, replace=False))
        for z in range(d):
            if z not in keep:
                out[z] = -1
        labelled_slices &= keep

    return LabelMask(
        labels=out,
        annotator_id=annotator_id or f"annotator_{model.seed}",
        labelled_slices=labelled_slices,
        spacing_mm=truth.spacing_mm,
        taxonomy=taxonomy,
    )


def annotator_panel(base: AnnotatorModel, n: int, seed: int) -> List[AnnotatorModel]:
    """n copies of an annotator model with independent seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [base.model_copy(update={"seed": int(s)}) for s in seeds]


def simulate_panel(
    truth: LabelMask,
    base: AnnotatorModel,
    n: int,
    seed: int,
    taxonomy: ClassTaxonomy = None
) -> List[LabelMask]:
    """Labels from n independent simulated annotators."""
    return [
        simulate_annotator(truth, model, taxonomy, annotator_id=f"annotator_{k:02d}")
        for k, model in enumerate(annotator_panel(base, n, seed))
    ]


def generate_cohort(template: PhantomSpec, n_scans: int) -> List[Tuple[str, PhantomSpec, CtVolume, LabelMask]]:
    """
    n_scans phantoms derived from a template, scan k using seed template.seed + k.

    Random blobs are redrawn per scan; explicit blobs are reused.
    """
    cohort = []
    for k in range(n_scans):
        spec = template.model_copy(update={"seed": template.seed + k})
        volume, truth = generate(spec)
        cohort.append((f"scan_{k:03d}", spec, volume, truth))
    return cohort
