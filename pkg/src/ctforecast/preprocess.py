"""Intensity normalization, resampling, CTV-driven cropping, and clinical encoding.

Raw scans arrive in Hounsfield units; they are clipped to [-900, 300] HU,
mapped to [0, 1], resampled to a uniform voxel spacing (default 1 x 1 x 3 mm),
and cropped to a cohort-wide in-plane box around the largest baseline CTV,
keeping only the axial slices that contain each patient's baseline CTV.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .cohort import CohortManifest, PatientRecord, save_cohort
from .errors import CohortValidationError
from .validation import ensure_finite, ensure_positive_spacing
from .volume import Mask, Volume, save_volume

HU_WINDOW = (-900.0, 300.0)
TARGET_SPACING_MM = (1.0, 1.0, 3.0)


def clip_normalize_hu(volume: Volume) -> Volume:
    """Clamp to the HU window and map linearly onto [0, 1]."""
    ensure_finite(volume.data, "volume")
    lo, hi = HU_WINDOW
    data = (np.clip(volume.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return volume.copy_with(data.astype(np.float32))


def resample_volume(volume: Volume, target_spacing=TARGET_SPACING_MM, mode: str = "linear") -> Volume:
    """Resample onto a uniform grid; trilinear for intensities, nearest for masks."""
    ensure_positive_spacing(target_spacing, "target spacing")
    if mode not in ("linear", "nearest"):
        raise ValueError(f"mode must be 'linear' or 'nearest', got {mode!r}")
    src = volume.spacing
    if tuple(src) == tuple(target_spacing):
        return volume.copy_with(volume.data.copy())
    out_shape = tuple(max(1, round(dim * s / t)) for dim, s, t in zip(volume.shape, src, target_spacing))
    axes = [np.arange(n) * t / s for n, t, s in zip(out_shape, target_spacing, src)]
    grid = np.meshgrid(*axes, indexing="ij")
    order = 1 if mode == "linear" else 0
    data = map_coordinates(volume.data, np.stack(grid), order=order, mode="nearest")
    out = Volume(data=data.astype(np.float32), spacing=tuple(target_spacing), origin=volume.origin)
    return out


def resample_mask(mask: Mask, target_spacing=TARGET_SPACING_MM) -> Mask:
    vol = resample_volume(mask, target_spacing, mode="nearest")
    return Mask(data=vol.data, spacing=vol.spacing, origin=vol.origin)


@dataclass
class CropSpec:
    """One in-plane box shared by every patient plus per-patient axial ranges.

    All bounds are inclusive voxel indices on the (resampled) grid.
    """

    row_min: int
    row_max: int
    col_min: int
    col_max: int
    axial_ranges: dict[str, tuple[int, int]]

    def in_plane_shape(self) -> tuple[int, int]:
        return (self.row_max - self.row_min + 1, self.col_max - self.col_min + 1)


def _footprint_box(footprint: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(footprint.any(axis=1))
    cols = np.flatnonzero(footprint.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def compute_crop_spec(manifest: CohortManifest, margin: int = 8, align: int = 1) -> CropSpec:
    """Box sized by the largest baseline CTV footprint in the cohort, grown
    (if needed) to cover every patient's footprint so cropping never removes
    a CTV voxel, then padded by `margin` and clamped to the grid.

    `align` > 1 additionally grows the box so its in-plane dims are a
    multiple of that value (the generators downsample by 4).
    """
    masks = {p.patient_id: manifest.load_mask(p.ctv_mask_ref) for p in manifest.patients}
    return _crop_spec_from_masks(masks, margin, align)


def apply_crop(volume: Volume, spec: CropSpec, patient_id: str) -> Volume:
    z0, z1 = spec.axial_ranges[patient_id]
    data = volume.data[spec.row_min : spec.row_max + 1, spec.col_min : spec.col_max + 1, z0 : z1 + 1]
    sx, sy, sz = volume.spacing
    origin = (
        volume.origin[0] + spec.row_min * sx,
        volume.origin[1] + spec.col_min * sy,
        volume.origin[2] + z0 * sz,
    )
    out = volume.copy_with(data.copy(), origin=origin)
    return out


# ---------------------------------------------------------------------------
# clinical covariates


@dataclass
class NormalizationStats:
    """Frozen statistics from the training split; serialized with checkpoints."""

    age_min: float
    age_max: float
    dose_max: float
    n_histology: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationStats":
        return cls(**doc)

    @classmethod
    def from_records(cls, records: list[PatientRecord], n_histology: int) -> "NormalizationStats":
        if not records:
            raise ValueError("cannot derive normalization statistics from zero records")
        ages = [r.age_years for r in records]
        doses = [s.cumulative_dose_gy for r in records for s in r.scans]
        return cls(age_min=min(ages), age_max=max(ages), dose_max=max(doses), n_histology=n_histology)

    @property
    def encoding_dim(self) -> int:
        return 2 + self.n_histology + 2


def normalize_dose(dose_gy: float, dose_max: float) -> float:
    """Min-max with a physical floor at 0 Gy, clamped to [0, 1]."""
    if dose_max <= 0:
        raise ValueError(f"dose_max must be > 0, got {dose_max}")
    return float(np.clip(dose_gy / dose_max, 0.0, 1.0))


def encode_clinical(record: PatientRecord, stats: NormalizationStats) -> np.ndarray:
    """(age_norm, sex, histology one-hot, cT_norm, cN_norm), every entry in [0, 1].

    Out-of-range test-patient ages are clamped so the encoding stays valid
    for patients outside the training-split range.
    """
    if not (0 <= record.histology < stats.n_histology):
        raise ValueError(
            f"patient {record.patient_id}: histology index {record.histology} "
            f"outside [0, {stats.n_histology})"
        )
    age_range = stats.age_max - stats.age_min
    age_norm = 0.0 if age_range == 0 else (record.age_years - stats.age_min) / age_range
    one_hot = np.zeros(stats.n_histology)
    one_hot[record.histology] = 1.0
    vec = np.concatenate(
        [
            [age_norm, float(record.sex)],
            one_hot,
            [(record.ct_stage - 1) / 3.0, record.cn_stage / 3.0],
        ]
    )
    return np.clip(vec, 0.0, 1.0)


class ClinicalEncoder(BaseEstimator, TransformerMixin):
    """Transformer mapping patient records to normalized covariate vectors.

    Fit only on training-split records; the fitted statistics travel with
    model checkpoints so inference is self-contained.
    """

    def __init__(self, n_histology: int = 7):
        self.n_histology = n_histology

    def fit(self, records: list[PatientRecord], y=None):
        self.stats_ = NormalizationStats.from_records(records, self.n_histology)
        return self

    def transform(self, records: list[PatientRecord]) -> np.ndarray:
        if not hasattr(self, "stats_"):
            raise NotFittedError("ClinicalEncoder must be fitted before transform")
        return np.stack([encode_clinical(r, self.stats_) for r in records])


# ---------------------------------------------------------------------------
# cohort-level stage


def preprocess_cohort(
    manifest: CohortManifest,
    out_dir: str | os.PathLike,
    target_spacing=TARGET_SPACING_MM,
    margin: int = 8,
) -> CohortManifest:
    """Normalize, resample, and crop every scan; write a derived cohort whose
    manifest records the preprocessing provenance."""
    out_dir = os.fspath(out_dir)
    resampled_masks = {}
    for patient in manifest.patients:
        mask = manifest.load_mask(patient.ctv_mask_ref)
        resampled_masks[patient.patient_id] = resample_mask(mask, target_spacing)

    # crop spec is derived on the resampled grid; in-plane dims aligned to the
    # generators' downsampling factor
    spec = _crop_spec_from_masks(resampled_masks, margin, align=4)

    for patient in manifest.patients:
        mask = resampled_masks[patient.patient_id]
        cropped_mask = apply_crop(mask, spec, patient.patient_id)
        save_volume(cropped_mask, os.path.join(out_dir, patient.ctv_mask_ref))
        for scan in patient.scans:
            vol = manifest.load_volume(scan.volume_ref)
            vol = clip_normalize_hu(vol)
            vol = resample_volume(vol, target_spacing, mode="linear")
            vol = apply_crop(vol, spec, patient.patient_id)
            save_volume(vol, os.path.join(out_dir, scan.volume_ref))

    out = CohortManifest(
        format_version=manifest.format_version,
        provenance=manifest.provenance,
        patients=manifest.patients,
        cohort_stats=manifest.cohort_stats,
        phantom_truth=manifest.phantom_truth,
        preprocessing={
            "hu_window": list(HU_WINDOW),
            "target_spacing_mm": list(target_spacing),
            "crop_margin": margin,
            "in_plane_box": [spec.row_min, spec.row_max, spec.col_min, spec.col_max],
            "axial_ranges": {k: list(v) for k, v in spec.axial_ranges.items()},
        },
        root=out_dir,
    )
    save_cohort(out, out_dir)
    return out


def _aligned(lo: int, hi: int, dim: int, align: int) -> tuple[int, int]:
    """Grow [lo, hi] until its length is a multiple of `align`, staying in grid."""
    if align <= 1:
        return lo, hi
    while (hi - lo + 1) % align:
        if hi < dim - 1:
            hi += 1
        elif lo > 0:
            lo -= 1
        else:
            raise CohortValidationError(
                f"grid dim {dim} cannot host a crop box aligned to {align} voxels"
            )
    return lo, hi


def _crop_spec_from_masks(masks: dict[str, Mask], margin: int, align: int = 4) -> CropSpec:
    best_area = -1
    box = None
    boxes = []
    axial = {}
    grid_shape = None
    for pid, mask in masks.items():
        grid_shape = mask.shape
        if mask.voxel_count() == 0:
            raise CohortValidationError(f"patient {pid}: empty baseline CTV mask")
        footprint = mask.data.any(axis=2)
        pbox = _footprint_box(footprint)
        boxes.append(pbox)
        area = int(footprint.sum())
        if area > best_area:
            best_area = area
            box = pbox
        slices = np.flatnonzero(mask.data.any(axis=(0, 1)))
        axial[pid] = (int(slices[0]), int(slices[-1]))
    if box is None:
        raise CohortValidationError("cannot derive a crop box from an empty cohort")
    r0, r1, c0, c1 = box
    for pr0, pr1, pc0, pc1 in boxes:
        r0, r1 = min(r0, pr0), max(r1, pr1)
        c0, c1 = min(c0, pc0), max(c1, pc1)
    h, w = grid_shape[0], grid_shape[1]
    r0, r1 = _aligned(max(0, r0 - margin), min(h - 1, r1 + margin), h, align)
    c0, c1 = _aligned(max(0, c0 - margin), min(w - 1, c1 + margin), w, align)
    return CropSpec(row_min=r0, row_max=r1, col_min=c0, col_max=c1, axial_ranges=axial)
