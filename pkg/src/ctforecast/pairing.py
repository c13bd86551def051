"""Supervised pair construction from longitudinal cohorts.

Every ordered pair of scans (earlier -> later) within one patient becomes a
training tuple whose conditioning combines the patient's clinical vector with
the normalized dose increment delivered between the two acquisitions.
Identity pairs (same scan as input and target, zero increment) anchor the
near-zero-dose behavior.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .cohort import CohortManifest
from .preprocess import NormalizationStats, encode_clinical, normalize_dose

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TrainingTuple:
    patient_id: str
    input_ref: str
    target_ref: str
    mask_ref: str
    dose_increment_gy: float
    input_dose_gy: float
    is_identity: bool

    def __post_init__(self):
        if self.dose_increment_gy < 0:
            raise ValueError(f"dose increment must be >= 0, got {self.dose_increment_gy}")
        if self.is_identity and self.dose_increment_gy != 0:
            raise ValueError("identity tuples must carry a zero dose increment")
        if self.is_identity != (self.input_ref == self.target_ref):
            raise ValueError("is_identity must match input_ref == target_ref")


@dataclass
class SplitAssignment:
    """Patient-level partition into train/val/test (~80/5/15 by count)."""

    assignment: dict[str, str]

    def patients(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return sorted(pid for pid, s in self.assignment.items() if s == split)

    def split_of(self, patient_id: str) -> str:
        return self.assignment[patient_id]


def split_patients(manifest: CohortManifest, seed: int = 0) -> SplitAssignment:
    """Deterministic patient-level hold-out; every split non-empty for n >= 3."""
    ids = [p.patient_id for p in manifest.patients]
    if len(ids) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(ids))
    n = len(order)
    n_val = max(1, round(0.05 * n))
    n_test = max(1, round(0.15 * n))
    assignment = {}
    for i, pid in enumerate(order):
        if i < n - n_val - n_test:
            assignment[pid] = "train"
        elif i < n - n_test:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    return SplitAssignment(assignment=assignment)


def enumerate_transitions(
    manifest: CohortManifest,
    split: SplitAssignment | None = None,
    subset: str | None = None,
    include_identity: bool = True,
) -> list[TrainingTuple]:
    """All ordered within-patient scan pairs (t earlier than s), plus one
    identity pair per scan when enabled."""
    tuples = []
    for patient in manifest.patients:
        if split is not None and subset is not None and split.split_of(patient.patient_id) != subset:
            continue
        scans = patient.scans
        for i, earlier in enumerate(scans):
            if include_identity:
                tuples.append(
                    TrainingTuple(
                        patient_id=patient.patient_id,
                        input_ref=earlier.volume_ref,
                        target_ref=earlier.volume_ref,
                        mask_ref=patient.ctv_mask_ref,
                        dose_increment_gy=0.0,
                        input_dose_gy=earlier.cumulative_dose_gy,
                        is_identity=True,
                    )
                )
            for later in scans[i + 1 :]:
                tuples.append(
                    TrainingTuple(
                        patient_id=patient.patient_id,
                        input_ref=earlier.volume_ref,
                        target_ref=later.volume_ref,
                        mask_ref=patient.ctv_mask_ref,
                        dose_increment_gy=later.cumulative_dose_gy - earlier.cumulative_dose_gy,
                        input_dose_gy=earlier.cumulative_dose_gy,
                        is_identity=False,
                    )
                )
    return tuples


def build_conditioning(clinical: np.ndarray, dose_increment_gy: float, dose_max: float) -> np.ndarray:
    """Conditioning vector: clinical covariates with the normalized dose
    increment appended; every component in [0, 1]."""
    return np.concatenate([np.clip(clinical, 0.0, 1.0), [normalize_dose(dose_increment_gy, dose_max)]])


def conditioning_for_tuple(
    tup: TrainingTuple, manifest: CohortManifest, stats: NormalizationStats
) -> np.ndarray:
    clinical = encode_clinical(manifest.patient(tup.patient_id), stats)
    return build_conditioning(clinical, tup.dose_increment_gy, stats.dose_max)


# ---------------------------------------------------------------------------
# slice-level sampling


def slice_samples_2d(tup: TrainingTuple, manifest: CohortManifest, conditioning: np.ndarray):
    """One (input slice, target slice, conditioning, mask slice) per axial slice."""
    x = manifest.load_volume(tup.input_ref).data
    y = manifest.load_volume(tup.target_ref).data
    m = manifest.load_mask(tup.mask_ref).data
    if x.shape != y.shape or x.shape != m.shape:
        raise ValueError(
            f"tuple {tup.patient_id}: input/target/mask grids disagree: {x.shape}, {y.shape}, {m.shape}"
        )
    return [(x[:, :, k], y[:, :, k], conditioning, m[:, :, k]) for k in range(x.shape[2])]


def triplet_indices(n_slices: int) -> list[tuple[int, int, int]]:
    """Sliding 3-window over axial indices with clamped replication at the edges."""
    if n_slices < 3:
        raise ValueError(f"need at least 3 axial slices for triplet sampling, got {n_slices}")
    return [(max(k - 1, 0), k, min(k + 1, n_slices - 1)) for k in range(n_slices)]


def triplet_samples_25d(tup: TrainingTuple, manifest: CohortManifest, conditioning: np.ndarray):
    """One (input triplet, target center slice, conditioning, mask slice) per
    axial position; triplets stack 3 consecutive input slices channel-wise."""
    x = manifest.load_volume(tup.input_ref).data
    y = manifest.load_volume(tup.target_ref).data
    m = manifest.load_mask(tup.mask_ref).data
    samples = []
    for lo, k, hi in triplet_indices(x.shape[2]):
        triplet = np.stack([x[:, :, lo], x[:, :, k], x[:, :, hi]])
        samples.append((triplet, y[:, :, k], conditioning, m[:, :, k]))
    return samples


# ---------------------------------------------------------------------------
# audit export


def export_tuples(tuples: list[TrainingTuple], path: str | os.PathLike) -> None:
    """One JSON record per line, for audit and downstream stages."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        for tup in tuples:
            fh.write(json.dumps(asdict(tup), sort_keys=True))
            fh.write("\n")


def load_tuples(path: str | os.PathLike) -> list[TrainingTuple]:
    with open(path) as fh:
        return [TrainingTuple(**json.loads(line)) for line in fh if line.strip()]
