import json
import math
import os

import numpy as np
import pytest

from ctforecast.cohort import (
    CohortManifest,
    CohortStats,
    PatientRecord,
    PhantomConfig,
    ScanRecord,
    analytic_tumor_volume_mm3,
    ellipsoid_shell_voxel_count,
    generate_phantom_cohort,
    ground_truth_volume,
    load_cohort,
    sample_cohort_metadata,
    save_cohort,
)
from ctforecast.errors import CohortValidationError, ConfigError, UnsupportedOperationError

from conftest import TINY_CONFIG


def test_shrinkage_law_closed_form():
    # independent evaluation of V0 * exp(-alpha * d / 60)
    assert analytic_tumor_volume_mm3(1000.0, 1.2, 60.0) == pytest.approx(1000.0 * math.exp(-1.2), rel=1e-12)
    assert analytic_tumor_volume_mm3(1000.0, 1.2, 60.0) == pytest.approx(301.194, abs=1e-3)


def test_shrinkage_law_degenerate_cases():
    assert analytic_tumor_volume_mm3(1000.0, 1.2, 0.0) == 1000.0
    assert analytic_tumor_volume_mm3(1000.0, 0.0, 45.0) == 1000.0


def test_shrinkage_monotone_decay():
    doses = np.linspace(0, 68.4, 20)
    vols = [analytic_tumor_volume_mm3(500.0, 0.9, d) for d in doses]
    assert all(a > b for a, b in zip(vols, vols[1:]))


def test_ground_truth_requires_synthetic(tiny_cohort):
    assert ground_truth_volume(tiny_cohort, "p000", 0.0) == pytest.approx(
        tiny_cohort.phantom_truth["p000"].v0_mm3
    )
    ingested = CohortManifest(
        format_version=1,
        provenance="ingested",
        patients=tiny_cohort.patients,
        cohort_stats=tiny_cohort.cohort_stats,
    )
    with pytest.raises(UnsupportedOperationError):
        ground_truth_volume(ingested, "p000", 0.0)


def test_generation_deterministic(tmp_path):
    cfg = PhantomConfig(
        n_patients=2,
        grid=(24, 24, 8),
        tumor_axes_mm=((4.0, 6.0), (4.0, 6.0), (4.0, 5.5)),
        center_jitter_mm=(1.0, 1.0, 0.5),
        seed=99,
    )
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_phantom_cohort(cfg, a)
    generate_phantom_cohort(cfg, b)
    files_a = sorted(os.path.join(r, f) for r, _, fs in os.walk(a) for f in fs)
    files_b = sorted(os.path.join(r, f) for r, _, fs in os.walk(b) for f in fs)
    assert [os.path.relpath(f, a) for f in files_a] == [os.path.relpath(f, b) for f in files_b]
    for fa, fb in zip(files_a, files_b):
        assert open(fa, "rb").read() == open(fb, "rb").read(), fa


def test_schedule_invariants(tiny_cohort):
    for p in tiny_cohort.patients:
        doses = [s.cumulative_dose_gy for s in p.scans]
        assert doses[0] == 0.0
        assert all(a < b for a, b in zip(doses, doses[1:]))
        fraction = tiny_cohort.phantom_truth[p.patient_id].fraction_gy
        for d in doses[1:]:
            assert d / fraction == pytest.approx(round(d / fraction), abs=1e-9)
            assert d <= TINY_CONFIG.max_dose_gy


def test_mask_volume_shape_agreement(tiny_cohort):
    for p in tiny_cohort.patients:
        mask = tiny_cohort.load_mask(p.ctv_mask_ref)
        for s in p.scans:
            assert tiny_cohort.load_volume(s.volume_ref).shape == mask.shape


def _independent_ellipsoid_count(grid, spacing, center, axes):
    # voxel-center counting oracle, written independently of the generator
    count = 0
    for i in range(grid[0]):
        for j in range(grid[1]):
            for k in range(grid[2]):
                x = (i * spacing[0] - center[0]) / axes[0]
                y = (j * spacing[1] - center[1]) / axes[1]
                z = (k * spacing[2] - center[2]) / axes[2]
                if x * x + y * y + z * z <= 1.0:
                    count += 1
    return count


def test_baseline_mask_matches_analytic_volume_within_shell(tiny_cohort):
    cfg = TINY_CONFIG
    vox = float(np.prod(cfg.spacing_mm))
    for p in tiny_cohort.patients:
        truth = tiny_cohort.phantom_truth[p.patient_id]
        mask_count = tiny_cohort.load_mask(p.ctv_mask_ref).voxel_count()
        oracle_count = _independent_ellipsoid_count(cfg.grid, cfg.spacing_mm, truth.center_mm, truth.axes_mm)
        assert mask_count == oracle_count
        shell = ellipsoid_shell_voxel_count(cfg.grid, cfg.spacing_mm, (0, 0, 0), truth.center_mm, truth.axes_mm)
        assert abs(mask_count * vox - truth.v0_mm3) <= shell * vox


def test_manifest_round_trip(tiny_cohort, tmp_path):
    save_cohort(tiny_cohort, tmp_path)
    back = load_cohort(tmp_path / "manifest.json", check_files=False)
    assert back.patients == tiny_cohort.patients
    assert back.cohort_stats == tiny_cohort.cohort_stats
    assert back.phantom_truth == tiny_cohort.phantom_truth
    assert back.provenance == "synthetic"


def _manifest_doc(doses):
    scans = [
        {"time_index": j, "cumulative_dose_gy": d, "volume_ref": f"p/scan_{j}.raw"} for j, d in enumerate(doses)
    ]
    return {
        "format_version": 1,
        "provenance": "synthetic",
        "patients": [
            {
                "patient_id": "pX",
                "age_years": 60.0,
                "sex": 0,
                "histology": 0,
                "ct_stage": 1,
                "cn_stage": 0,
                "scans": scans,
                "ctv_mask_ref": "p/ctv.raw",
            }
        ],
        "cohort_stats": {"age_min": 60.0, "age_max": 60.0, "dose_max": max(doses), "n_histology": 7},
        "phantom_truth": None,
        "preprocessing": None,
    }


def test_non_monotone_dose_rejected(tmp_path):
    doc = _manifest_doc([0.0, 20.0, 10.0])
    doc["cohort_stats"]["dose_max"] = 20.0
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortValidationError, match="pX.*non-monotone dose"):
        load_cohort(path, check_files=False)


def test_missing_baseline_rejected(tmp_path):
    doc = _manifest_doc([0.0, 10.0])
    doc["patients"][0]["scans"] = doc["patients"][0]["scans"][1:]
    doc["cohort_stats"]["dose_max"] = 10.0
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortValidationError, match="pX"):
        load_cohort(path, check_files=False)


def test_dangling_reference_rejected(tmp_path):
    doc = _manifest_doc([0.0, 10.0])
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortValidationError, match="dangling reference"):
        load_cohort(path, check_files=True)


def test_empty_cohort_is_valid(tmp_path):
    manifest = CohortManifest(
        format_version=1,
        provenance="synthetic",
        patients=[],
        cohort_stats=CohortStats(age_min=0.0, age_max=0.0, dose_max=0.0, n_histology=7),
    )
    save_cohort(manifest, tmp_path)
    back = load_cohort(tmp_path / "manifest.json")
    assert back.patients == []


def test_grid_too_small_rejected():
    cfg = PhantomConfig(n_patients=1, grid=(16, 16, 4), tumor_axes_mm=((8.0, 13.0), (8.0, 13.0), (7.0, 11.0)))
    with pytest.raises(ConfigError, match="grid too small"):
        sample_cohort_metadata(cfg)


def test_dose_stats_consistency_checked(tmp_path):
    doc = _manifest_doc([0.0, 10.0])
    doc["cohort_stats"]["dose_max"] = 99.0
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortValidationError, match="dose_max"):
        load_cohort(path, check_files=False)


def test_patient_record_helpers():
    rec = PatientRecord(
        patient_id="p",
        age_years=50.0,
        sex=1,
        histology=2,
        ct_stage=2,
        cn_stage=1,
        scans=[ScanRecord(0, 0.0, "a"), ScanRecord(1, 10.0, "b")],
        ctv_mask_ref="m",
    )
    assert rec.baseline().cumulative_dose_gy == 0.0
    assert [s.volume_ref for s in rec.followups()] == ["b"]
