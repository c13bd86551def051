"""Longitudinal cohort data model, manifest I/O, and synthetic phantom generation.

The phantom generator stands in for a clinical dataset: each patient gets a
textured lung background with sparse bright vessels and an ellipsoidal tumor
whose volume decays with cumulative dose following an analytic law

    V(d) = V0 * exp(-alpha * d / 60)

(60 Gy being the prescribed total dose). The per-patient law parameters are
recorded in the manifest so downstream tests can score predictions against
exact ground truth.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import CohortValidationError, ConfigError, UnsupportedOperationError, VolumeParseError
from .volume import Mask, Volume, load_mask, load_volume, save_volume

MANIFEST_VERSION = 1
REFERENCE_DOSE_GY = 60.0


@dataclass
class ScanRecord:
    time_index: int
    cumulative_dose_gy: float
    volume_ref: str


@dataclass
class PatientRecord:
    patient_id: str
    age_years: float
    sex: int
    histology: int
    ct_stage: int
    cn_stage: int
    scans: list[ScanRecord]
    ctv_mask_ref: str

    def baseline(self) -> ScanRecord:
        return self.scans[0]

    def followups(self) -> list[ScanRecord]:
        return self.scans[1:]


@dataclass
class CohortStats:
    age_min: float
    age_max: float
    dose_max: float
    n_histology: int


@dataclass
class PhantomTruth:
    """Per-patient shrinkage-law parameters (alpha already includes any
    stage modulation applied at generation time)."""

    v0_mm3: float
    alpha: float
    center_mm: tuple[float, float, float]
    axes_mm: tuple[float, float, float]
    fraction_gy: float


@dataclass
class CohortManifest:
    format_version: int
    provenance: str  # "synthetic" | "ingested"
    patients: list[PatientRecord]
    cohort_stats: CohortStats
    phantom_truth: dict[str, PhantomTruth] | None = None
    preprocessing: dict | None = None
    root: str = ""  # directory paths are resolved against; not serialized

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(f"unknown patient {patient_id!r}")

    def resolve(self, ref: str) -> str:
        return os.path.join(self.root, ref)

    def load_volume(self, ref: str) -> Volume:
        return load_volume(self.resolve(ref))

    def load_mask(self, ref: str) -> Mask:
        return load_mask(self.resolve(ref))


@dataclass
class PhantomConfig:
    n_patients: int = 12
    grid: tuple[int, int, int] = (64, 64, 12)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 3.0)
    followups_mean: float = 2.38
    followups_sd: float = 1.31
    max_followups: int = 6
    fraction_sizes_gy: tuple[float, ...] = (1.8, 2.0)
    max_dose_gy: float = 68.4
    alpha_range: tuple[float, float] = (0.7, 1.4)
    ct_stage_modulates_alpha: bool = True
    age_range: tuple[float, float] = (45.0, 85.0)
    n_histology: int = 7
    tumor_axes_mm: tuple[tuple[float, float], ...] = ((8.0, 13.0), (8.0, 13.0), (7.0, 11.0))
    center_jitter_mm: tuple[float, float, float] = (3.0, 3.0, 1.5)
    background_hu: float = -760.0
    tumor_hu: float = 20.0
    vessel_hu: float = -50.0
    vessel_fraction: float = 0.015
    noise_sd_hu: float = 35.0
    noise_smooth_vox: float = 1.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"grid must be three dims >= 1, got {self.grid}")
        if min(self.spacing_mm) <= 0:
            raise ConfigError("spacing components must be > 0")
        if not self.fraction_sizes_gy:
            raise ConfigError("at least one fraction size is required")
        if self.max_dose_gy <= 0 or self.max_dose_gy > 68.4:
            raise ConfigError("max_dose_gy must lie in (0, 68.4]")
        if self.alpha_range[0] > self.alpha_range[1] or self.alpha_range[0] < 0:
            raise ConfigError(f"invalid alpha range {self.alpha_range}")
        if self.followups_mean <= 0 or self.followups_sd < 0:
            raise ConfigError("follow-up schedule model must have positive mean and non-negative sd")
        # The largest admissible tumor must fit inside the grid with room to spare.
        for axis, (_, hi), jit, dim, sp in zip("hwd", self.tumor_axes_mm, self.center_jitter_mm, self.grid, self.spacing_mm):
            needed = 2.0 * (hi + jit) / sp + 2.0
            if needed > dim:
                raise ConfigError(
                    f"grid too small along axis {axis!r}: tumor semi-axis up to {hi} mm plus jitter "
                    f"needs {needed:.1f} voxels at {sp} mm spacing but the grid has {dim}"
                )


def analytic_tumor_volume_mm3(v0_mm3: float, alpha: float, dose_gy: float) -> float:
    """Closed-form shrinkage law: V(d) = V0 * exp(-alpha * d / 60)."""
    return v0_mm3 * math.exp(-alpha * dose_gy / REFERENCE_DOSE_GY)


def ground_truth_volume(manifest: CohortManifest, patient_id: str, dose_gy: float) -> float:
    """Exact tumor volume (mm^3) of a synthetic patient at a cumulative dose."""
    if manifest.provenance != "synthetic" or not manifest.phantom_truth:
        raise UnsupportedOperationError("ground-truth volume is only defined for synthetic cohorts")
    truth = manifest.phantom_truth[patient_id]
    return analytic_tumor_volume_mm3(truth.v0_mm3, truth.alpha, dose_gy)


# ---------------------------------------------------------------------------
# ellipsoid rasterization


def _voxel_centers(grid, spacing, origin):
    h, w, d = grid
    xs = origin[0] + np.arange(h) * spacing[0]
    ys = origin[1] + np.arange(w) * spacing[1]
    zs = origin[2] + np.arange(d) * spacing[2]
    return np.meshgrid(xs, ys, zs, indexing="ij")


def ellipsoid_mask(grid, spacing, origin, center_mm, axes_mm) -> np.ndarray:
    """Binary voxel-center-inside-ellipsoid test."""
    gx, gy, gz = _voxel_centers(grid, spacing, origin)
    q = (
        ((gx - center_mm[0]) / axes_mm[0]) ** 2
        + ((gy - center_mm[1]) / axes_mm[1]) ** 2
        + ((gz - center_mm[2]) / axes_mm[2]) ** 2
    )
    return (q <= 1.0).astype(np.float32)


def ellipsoid_shell_voxel_count(grid, spacing, origin, center_mm, axes_mm) -> int:
    """Number of voxels whose box the ellipsoid surface can pass through.

    A voxel is in the shell when the inside test disagrees across its 8
    corners, or when its center-test disagrees with an axis neighbor. Voxels
    outside the shell are counted exactly by the voxel-center mask, so
    |voxel count * voxel volume - analytic volume| <= shell count * voxel volume.
    """
    h, w, d = grid
    # corner test on the (h+1, w+1, d+1) lattice of voxel box corners
    xs = origin[0] + (np.arange(h + 1) - 0.5) * spacing[0]
    ys = origin[1] + (np.arange(w + 1) - 0.5) * spacing[1]
    zs = origin[2] + (np.arange(d + 1) - 0.5) * spacing[2]
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    inside = (
        ((gx - center_mm[0]) / axes_mm[0]) ** 2
        + ((gy - center_mm[1]) / axes_mm[1]) ** 2
        + ((gz - center_mm[2]) / axes_mm[2]) ** 2
    ) <= 1.0
    corner_stack = np.stack(
        [inside[i : i + h, j : j + w, k : k + d] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    )
    disagree = corner_stack.any(axis=0) & ~corner_stack.all(axis=0)

    center_inside = ellipsoid_mask(grid, spacing, origin, center_mm, axes_mm).astype(bool)
    boundary = np.zeros_like(center_inside)
    for axis in range(3):
        shifted = np.roll(center_inside, 1, axis=axis)
        shifted2 = np.roll(center_inside, -1, axis=axis)
        boundary |= center_inside != shifted
        boundary |= center_inside != shifted2
    return int((disagree | boundary).sum())


# ---------------------------------------------------------------------------
# phantom synthesis


def _smooth_noise(rng: np.random.Generator, grid, smooth_vox: float, sd: float) -> np.ndarray:
    raw = rng.standard_normal(grid)
    smoothed = gaussian_filter(raw, sigma=smooth_vox)
    std = smoothed.std()
    if std > 0:
        smoothed = smoothed * (sd / std)
    return smoothed.astype(np.float32)


def _sample_patient(config: PhantomConfig, rng: np.random.Generator, patient_id: str):
    age = float(rng.uniform(*config.age_range))
    sex = int(rng.integers(0, 2))
    histology = int(rng.integers(0, config.n_histology))
    ct_stage = int(rng.integers(1, 5))
    cn_stage = int(rng.integers(0, 4))

    h, w, d = config.grid
    sx, sy, sz = config.spacing_mm
    grid_center = ((h - 1) * sx / 2.0, (w - 1) * sy / 2.0, (d - 1) * sz / 2.0)
    jitter = rng.uniform(-np.asarray(config.center_jitter_mm), np.asarray(config.center_jitter_mm))
    center = tuple(float(c + j) for c, j in zip(grid_center, jitter))
    axes = tuple(float(rng.uniform(lo, hi)) for lo, hi in config.tumor_axes_mm)
    v0 = 4.0 / 3.0 * math.pi * axes[0] * axes[1] * axes[2]

    alpha = float(rng.uniform(*config.alpha_range))
    if config.ct_stage_modulates_alpha:
        alpha *= 1.0 + 0.1 * (ct_stage - 1)

    fraction = float(config.fraction_sizes_gy[rng.integers(0, len(config.fraction_sizes_gy))])
    max_fractions = int(config.max_dose_gy // fraction)
    n_follow = int(np.clip(round(rng.normal(config.followups_mean, config.followups_sd)), 1, config.max_followups))
    n_follow = min(n_follow, max_fractions)
    counts = np.sort(rng.choice(np.arange(1, max_fractions + 1), size=n_follow, replace=False))
    doses = [0.0] + [float(fraction * int(c)) for c in counts]

    scans = [
        ScanRecord(time_index=j, cumulative_dose_gy=dose, volume_ref=f"{patient_id}/scan_{j:02d}.raw")
        for j, dose in enumerate(doses)
    ]
    record = PatientRecord(
        patient_id=patient_id,
        age_years=age,
        sex=sex,
        histology=histology,
        ct_stage=ct_stage,
        cn_stage=cn_stage,
        scans=scans,
        ctv_mask_ref=f"{patient_id}/ctv_mask.raw",
    )
    truth = PhantomTruth(v0_mm3=v0, alpha=alpha, center_mm=center, axes_mm=axes, fraction_gy=fraction)
    return record, truth


def sample_cohort_metadata(config: PhantomConfig) -> CohortManifest:
    """Draw the full cohort manifest (demographics, schedules, shrinkage laws)
    without synthesizing any voxel data. Deterministic in config.seed."""
    config.validate()
    streams = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    patients, truths = [], {}
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        record, truth = _sample_patient(config, rng, f"p{i:03d}")
        patients.append(record)
        truths[record.patient_id] = truth
    stats = CohortStats(
        age_min=min((p.age_years for p in patients), default=0.0),
        age_max=max((p.age_years for p in patients), default=0.0),
        dose_max=max((s.cumulative_dose_gy for p in patients for s in p.scans), default=0.0),
        n_histology=config.n_histology,
    )
    return CohortManifest(
        format_version=MANIFEST_VERSION,
        provenance="synthetic",
        patients=patients,
        cohort_stats=stats,
        phantom_truth=truths,
    )


def _render_scan(config, rng, truth: PhantomTruth, dose_gy: float, vessel_field: np.ndarray) -> np.ndarray:
    shrink = math.exp(-truth.alpha * dose_gy / REFERENCE_DOSE_GY) ** (1.0 / 3.0)
    axes = tuple(a * shrink for a in truth.axes_mm)
    tumor = ellipsoid_mask(config.grid, config.spacing_mm, (0.0, 0.0, 0.0), truth.center_mm, axes).astype(bool)
    hu = np.full(config.grid, config.background_hu, dtype=np.float32)
    hu[vessel_field] = config.vessel_hu
    hu[tumor] = config.tumor_hu
    hu += _smooth_noise(rng, config.grid, config.noise_smooth_vox, config.noise_sd_hu)
    return hu


def _vessel_field(config: PhantomConfig, rng: np.random.Generator, baseline_mask: np.ndarray) -> np.ndarray:
    """Sparse bright structures, kept away from the tumor so the evaluation
    ROI around the CTV sees pure lung-vs-tumor contrast."""
    field = rng.random(config.grid) < config.vessel_fraction
    idx = np.argwhere(baseline_mask > 0)
    if idx.size:
        lo = idx.min(axis=0)
        hi = idx.max(axis=0)
        pad = np.array([6, 6, 2])
        lo = np.maximum(lo - pad, 0)
        hi = np.minimum(hi + pad, np.array(config.grid) - 1)
        field[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = False
    return field


def _write_patient(config: PhantomConfig, out_dir: str, patient: PatientRecord, truth: PhantomTruth, stream) -> None:
    rng = np.random.default_rng(stream)
    baseline_mask = ellipsoid_mask(config.grid, config.spacing_mm, (0.0, 0.0, 0.0), truth.center_mm, truth.axes_mm)
    vessels = _vessel_field(config, rng, baseline_mask)
    mask = Mask(data=baseline_mask, spacing=config.spacing_mm, origin=(0.0, 0.0, 0.0))
    save_volume(mask, os.path.join(out_dir, patient.ctv_mask_ref))
    for scan in patient.scans:
        hu = _render_scan(config, rng, truth, scan.cumulative_dose_gy, vessels)
        vol = Volume(data=hu, spacing=config.spacing_mm, origin=(0.0, 0.0, 0.0))
        save_volume(vol, os.path.join(out_dir, scan.volume_ref))


def generate_phantom_cohort(config: PhantomConfig, out_dir: str | os.PathLike, workers: int = 1) -> CohortManifest:
    """Synthesize the cohort on disk (volumes in HU, baseline CTV masks) and
    write its manifest. Byte-identical for identical configs; per-patient RNG
    streams keep the output independent of `workers`."""
    out_dir = os.fspath(out_dir)
    manifest = sample_cohort_metadata(config)
    manifest.root = out_dir
    streams = np.random.SeedSequence((config.seed, 0xC0FFEE)).spawn(max(config.n_patients, 1))
    jobs = [
        (patient, manifest.phantom_truth[patient.patient_id], stream)
        for patient, stream in zip(manifest.patients, streams)
    ]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda job: _write_patient(config, out_dir, *job), jobs))
    else:
        for job in jobs:
            _write_patient(config, out_dir, *job)
    save_cohort(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O


def _manifest_to_dict(manifest: CohortManifest) -> dict:
    doc = {
        "format_version": manifest.format_version,
        "provenance": manifest.provenance,
        "patients": [asdict(p) for p in manifest.patients],
        "cohort_stats": asdict(manifest.cohort_stats),
        "phantom_truth": {k: asdict(v) for k, v in manifest.phantom_truth.items()}
        if manifest.phantom_truth
        else None,
        "preprocessing": manifest.preprocessing,
    }
    return doc


def save_cohort(manifest: CohortManifest, out_dir: str | os.PathLike) -> str:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(_manifest_to_dict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _validate_manifest(manifest: CohortManifest, check_files: bool) -> None:
    seen = set()
    dose_max = 0.0
    for p in manifest.patients:
        pid = p.patient_id
        if pid in seen:
            raise CohortValidationError(f"patient {pid}: duplicate patient_id")
        seen.add(pid)
        if not p.scans:
            raise CohortValidationError(f"patient {pid}: missing baseline scan")
        if p.scans[0].time_index != 0 or p.scans[0].cumulative_dose_gy != 0.0:
            raise CohortValidationError(f"patient {pid}: baseline scan must have time_index 0 and dose 0")
        for a, b in zip(p.scans, p.scans[1:]):
            if b.time_index <= a.time_index:
                raise CohortValidationError(f"patient {pid}: time_index not strictly increasing")
            if b.cumulative_dose_gy < a.cumulative_dose_gy:
                raise CohortValidationError(f"patient {pid}: non-monotone dose sequence")
        if not (1 <= p.ct_stage <= 4 and 0 <= p.cn_stage <= 3):
            raise CohortValidationError(f"patient {pid}: cT/cN stage out of range")
        if not (0 <= p.histology < manifest.cohort_stats.n_histology):
            raise CohortValidationError(f"patient {pid}: histology index out of range")
        dose_max = max(dose_max, max(s.cumulative_dose_gy for s in p.scans))
        if check_files:
            for ref in [p.ctv_mask_ref] + [s.volume_ref for s in p.scans]:
                full = manifest.resolve(ref)
                if not (os.path.exists(full) and os.path.exists(full + ".hdr")):
                    raise CohortValidationError(f"patient {pid}: dangling reference {ref!r}")
    if manifest.patients and abs(dose_max - manifest.cohort_stats.dose_max) > 1e-9:
        raise CohortValidationError(
            f"cohort_stats.dose_max={manifest.cohort_stats.dose_max} inconsistent with scans (max {dose_max})"
        )


def load_cohort(manifest_path: str | os.PathLike, check_files: bool = True) -> CohortManifest:
    """Parse and eagerly validate a cohort manifest."""
    manifest_path = os.fspath(manifest_path)
    try:
        with open(manifest_path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeParseError(f"{manifest_path}: unreadable manifest: {exc}") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise CohortValidationError(f"unsupported manifest format_version {doc.get('format_version')!r}")
    patients = [
        PatientRecord(
            patient_id=p["patient_id"],
            age_years=p["age_years"],
            sex=p["sex"],
            histology=p["histology"],
            ct_stage=p["ct_stage"],
            cn_stage=p["cn_stage"],
            scans=[ScanRecord(**s) for s in p["scans"]],
            ctv_mask_ref=p["ctv_mask_ref"],
        )
        for p in doc["patients"]
    ]
    truth = doc.get("phantom_truth")
    manifest = CohortManifest(
        format_version=doc["format_version"],
        provenance=doc["provenance"],
        patients=patients,
        cohort_stats=CohortStats(**doc["cohort_stats"]),
        phantom_truth={
            k: PhantomTruth(
                v0_mm3=v["v0_mm3"],
                alpha=v["alpha"],
                center_mm=tuple(v["center_mm"]),
                axes_mm=tuple(v["axes_mm"]),
                fraction_gy=v["fraction_gy"],
            )
            for k, v in truth.items()
        }
        if truth
        else None,
        preprocessing=doc.get("preprocessing"),
        root=os.path.dirname(os.path.abspath(manifest_path)),
    )
    _validate_manifest(manifest, check_files=check_files)
    return manifest
