"""Dose-response trajectory generation.

Every prediction is anchored at the baseline scan: a query lists dose
increments (relative to baseline, possibly hypothetical) and each entry is
generated independently, never chained on a previous prediction. Entry seeds
derive from (query seed, dose value), so permuting the query list permutes
the outputs identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import CohortManifest
from .errors import StatsMismatchError
from .evaluation import LocalROI, tumor_volume_otsu
from .preprocess import NormalizationStats, encode_clinical
from .training import ForecasterBase
from .volume import Volume, save_volume


@dataclass
class DoseQuery:
    patient_id: str
    dose_increments_gy: list[float]
    seed: int = 0

    def __post_init__(self):
        if any(d < 0 for d in self.dose_increments_gy):
            raise ValueError("dose increments must be >= 0")


@dataclass
class TrajectoryEntry:
    dose_gy: float
    otsu_volume_mm3: float
    extrapolation: bool
    seed: int
    volume_ref: str | None = None


@dataclass
class Trajectory:
    patient_id: str
    model_id: str
    entries: list[TrajectoryEntry]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        doc = json.loads(text)
        return cls(
            patient_id=doc["patient_id"],
            model_id=doc["model_id"],
            entries=[TrajectoryEntry(**e) for e in doc["entries"]],
            metadata=doc.get("metadata", {}),
        )


def entry_seed(query_seed: int, dose_gy: float) -> int:
    """Deterministic per-entry seed from the query seed and the dose value
    (not the list position, to keep trajectories permutation-invariant)."""
    ss = np.random.SeedSequence([int(query_seed) & 0xFFFFFFFF, int(round(dose_gy * 1000)) & 0xFFFFFFFF])
    return int(ss.generate_state(1)[0])


def ensure_stats_match(checkpoint_stats: NormalizationStats, volume_stats: NormalizationStats) -> None:
    if checkpoint_stats != volume_stats:
        raise StatsMismatchError(
            f"volume was preprocessed with {volume_stats}, checkpoint expects {checkpoint_stats}"
        )


def predict_followup(
    forecaster: ForecasterBase,
    baseline: Volume,
    clinical: np.ndarray,
    dose_gy: float,
    seed: int = 0,
    volume_stats: NormalizationStats | None = None,
) -> Volume:
    """Baseline-anchored dose-conditioned prediction; deterministic per seed.
    Refuses to run when the volume's preprocessing statistics disagree with
    the ones frozen into the checkpoint."""
    if volume_stats is not None:
        ensure_stats_match(forecaster.stats_, volume_stats)
    return forecaster.predict_volume(baseline, clinical, dose_gy, seed=seed)


def dose_response_trajectory(
    forecaster: ForecasterBase,
    manifest: CohortManifest,
    query: DoseQuery,
    out_dir: str | os.PathLike | None = None,
    roi_pad: int = 0,
) -> Trajectory:
    """Predict a volume per queried dose increment (each independently from
    the baseline) and attach its Otsu tumor volume. Doses beyond the training
    cohort maximum are flagged as extrapolation, not rejected."""
    patient = manifest.patient(query.patient_id)
    baseline = manifest.load_volume(patient.baseline().volume_ref)
    mask = manifest.load_mask(patient.ctv_mask_ref)
    roi = LocalROI.from_mask(mask, pad=roi_pad)
    clinical = encode_clinical(patient, forecaster.stats_)

    entries = []
    warnings = []
    for dose in query.dose_increments_gy:
        seed = entry_seed(query.seed, dose)
        pred = forecaster.predict_volume(baseline, clinical, dose, seed=seed)
        extrapolation = dose > forecaster.stats_.dose_max
        if extrapolation:
            warnings.append(f"dose {dose} Gy beyond training maximum {forecaster.stats_.dose_max} Gy")
        ref = None
        if out_dir is not None:
            ref = f"{query.patient_id}_{forecaster.family}_d{dose:g}.raw"
            save_volume(pred, os.path.join(os.fspath(out_dir), ref))
        entries.append(
            TrajectoryEntry(
                dose_gy=dose,
                otsu_volume_mm3=tumor_volume_otsu(pred, roi),
                extrapolation=extrapolation,
                seed=seed,
                volume_ref=ref,
            )
        )
    return Trajectory(
        patient_id=query.patient_id,
        model_id=forecaster.family,
        entries=entries,
        metadata={"query_seed": query.seed, "warnings": warnings, "roi": asdict(roi)},
    )
