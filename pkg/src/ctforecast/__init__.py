"""Dose-conditioned generative forecasting of longitudinal CT under
radiotherapy, evaluated on synthetic phantom cohorts."""

from .cohort import (
    CohortManifest,
    PatientRecord,
    PhantomConfig,
    ScanRecord,
    analytic_tumor_volume_mm3,
    generate_phantom_cohort,
    ground_truth_volume,
    load_cohort,
)
from .evaluation import LocalROI, VolumetricsReport, delta_v_percent, otsu_threshold, tumor_volume_otsu
from .inference import DoseQuery, Trajectory, dose_response_trajectory, predict_followup
from .pairing import TrainingTuple, build_conditioning, enumerate_transitions, split_patients
from .preprocess import ClinicalEncoder, NormalizationStats, clip_normalize_hu, preprocess_cohort, resample_volume
from .training import (
    CycleGanForecaster,
    DiffusionForecaster,
    PairedGanForecaster,
    TrainConfig,
    TrainReport,
    load_forecaster,
    train_model,
)
from .volume import Mask, Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "ClinicalEncoder",
    "CohortManifest",
    "CycleGanForecaster",
    "DiffusionForecaster",
    "DoseQuery",
    "LocalROI",
    "Mask",
    "NormalizationStats",
    "PairedGanForecaster",
    "PatientRecord",
    "PhantomConfig",
    "ScanRecord",
    "TrainConfig",
    "TrainReport",
    "TrainingTuple",
    "Trajectory",
    "Volume",
    "VolumetricsReport",
    "analytic_tumor_volume_mm3",
    "build_conditioning",
    "clip_normalize_hu",
    "delta_v_percent",
    "dose_response_trajectory",
    "enumerate_transitions",
    "generate_phantom_cohort",
    "ground_truth_volume",
    "load_cohort",
    "load_forecaster",
    "load_volume",
    "otsu_threshold",
    "predict_followup",
    "preprocess_cohort",
    "resample_volume",
    "save_volume",
    "split_patients",
    "train_model",
    "tumor_volume_otsu",
]
