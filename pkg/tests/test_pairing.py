import collections

import numpy as np
import pytest

from ctforecast.cohort import PhantomConfig, sample_cohort_metadata
from ctforecast.pairing import (
    TrainingTuple,
    build_conditioning,
    conditioning_for_tuple,
    enumerate_transitions,
    export_tuples,
    load_tuples,
    slice_samples_2d,
    split_patients,
    triplet_indices,
    triplet_samples_25d,
)
from ctforecast.preprocess import NormalizationStats


def _metadata_cohort(n_patients, seed):
    cfg = PhantomConfig(
        n_patients=n_patients,
        grid=(32, 32, 8),
        tumor_axes_mm=((5.0, 8.0), (5.0, 8.0), (4.5, 6.0)),
        center_jitter_mm=(2.0, 2.0, 1.0),
        seed=seed,
    )
    return sample_cohort_metadata(cfg)


def _brute_force_pairs(manifest, include_identity):
    # O(k^2) double loop, independent of the enumeration under test
    pairs = []
    for p in manifest.patients:
        for i in range(len(p.scans)):
            for j in range(len(p.scans)):
                if i < j:
                    pairs.append((p.patient_id, p.scans[j].cumulative_dose_gy - p.scans[i].cumulative_dose_gy))
                elif i == j and include_identity:
                    pairs.append((p.patient_id, 0.0))
    return pairs


class TestEnumeration:
    def test_three_scans_gives_six_tuples(self):
        manifest = _metadata_cohort(6, seed=3)
        patient = next(p for p in manifest.patients if len(p.scans) == 3)
        solo = type(manifest)(
            format_version=1,
            provenance="synthetic",
            patients=[patient],
            cohort_stats=manifest.cohort_stats,
        )
        tuples = enumerate_transitions(solo, include_identity=True)
        assert len(tuples) == 6
        assert sum(t.is_identity for t in tuples) == 3

    def test_single_scan_no_identity_gives_zero(self):
        manifest = _metadata_cohort(4, seed=5)
        patient = manifest.patients[0]
        patient.scans = patient.scans[:1]
        solo = type(manifest)(
            format_version=1,
            provenance="synthetic",
            patients=[patient],
            cohort_stats=manifest.cohort_stats,
        )
        assert enumerate_transitions(solo, include_identity=False) == []

    @pytest.mark.parametrize("include_identity", [False, True])
    def test_counts_match_formula_and_brute_force(self, include_identity):
        for seed in range(8):
            manifest = _metadata_cohort(5, seed=seed)
            tuples = enumerate_transitions(manifest, include_identity=include_identity)
            ks = [len(p.scans) for p in manifest.patients]
            expected = sum(k * (k - 1) // 2 for k in ks) + (sum(ks) if include_identity else 0)
            assert len(tuples) == expected
            assert len(tuples) == len(_brute_force_pairs(manifest, include_identity))

    def test_delta_multiset_matches_brute_force(self):
        manifest = _metadata_cohort(7, seed=21)
        tuples = enumerate_transitions(manifest, include_identity=True)
        got = collections.Counter((t.patient_id, t.dose_increment_gy) for t in tuples)
        want = collections.Counter(_brute_force_pairs(manifest, True))
        assert got == want

    def test_delta_reconstruction(self):
        manifest = _metadata_cohort(5, seed=9)
        dose_by_ref = {s.volume_ref: s.cumulative_dose_gy for p in manifest.patients for s in p.scans}
        for t in enumerate_transitions(manifest, include_identity=True):
            assert dose_by_ref[t.target_ref] - dose_by_ref[t.input_ref] == t.dose_increment_gy

    def test_identity_invariants(self):
        with pytest.raises(ValueError):
            TrainingTuple("p", "a", "a", "m", 1.0, 0.0, True)
        with pytest.raises(ValueError):
            TrainingTuple("p", "a", "b", "m", 1.0, 0.0, True)
        with pytest.raises(ValueError):
            TrainingTuple("p", "a", "b", "m", -1.0, 0.0, False)


class TestSplit:
    def test_twenty_patients(self):
        manifest = _metadata_cohort(20, seed=2)
        split = split_patients(manifest, seed=0)
        counts = collections.Counter(split.assignment.values())
        assert counts == {"train": 16, "val": 1, "test": 3}

    def test_deterministic(self):
        manifest = _metadata_cohort(12, seed=2)
        assert split_patients(manifest, seed=5).assignment == split_patients(manifest, seed=5).assignment
        assert split_patients(manifest, seed=5).assignment != split_patients(manifest, seed=6).assignment

    def test_exhaustive_disjoint_partition(self):
        manifest = _metadata_cohort(9, seed=4)
        split = split_patients(manifest, seed=1)
        ids = {p.patient_id for p in manifest.patients}
        assert set(split.assignment) == ids
        assert set(split.assignment.values()) <= {"train", "val", "test"}
        assert len(split.patients("train")) + len(split.patients("val")) + len(split.patients("test")) == len(ids)

    def test_minimum_cohort(self):
        manifest = _metadata_cohort(3, seed=0)
        split = split_patients(manifest, seed=0)
        assert all(len(split.patients(s)) == 1 for s in ("train", "val", "test"))
        with pytest.raises(ValueError):
            split_patients(_metadata_cohort(2, seed=0), seed=0)

    def test_no_cross_split_leakage(self):
        manifest = _metadata_cohort(10, seed=8)
        split = split_patients(manifest, seed=3)
        train = enumerate_transitions(manifest, split, "train")
        test = enumerate_transitions(manifest, split, "test")
        train_ids = {t.patient_id for t in train}
        test_ids = {t.patient_id for t in test}
        assert not (train_ids & test_ids)
        assert all(split.split_of(pid) == "train" for pid in train_ids)


class TestConditioning:
    def test_endpoints_and_length(self):
        clinical = np.array([0.2, 1.0, 0.0, 1.0, 0.5])
        assert build_conditioning(clinical, 0.0, 68.4)[-1] == 0.0
        assert build_conditioning(clinical, 68.4, 68.4)[-1] == 1.0
        assert build_conditioning(clinical, 10.0, 68.4).shape == (6,)

    def test_all_components_in_unit_interval(self):
        vec = build_conditioning(np.array([-0.5, 1.5]), 200.0, 68.4)
        assert (vec >= 0).all() and (vec <= 1).all()

    def test_conditioning_for_tuple(self, tiny_preprocessed):
        stats = NormalizationStats.from_records(tiny_preprocessed.patients, n_histology=7)
        tuples = enumerate_transitions(tiny_preprocessed, include_identity=True)
        h = conditioning_for_tuple(tuples[0], tiny_preprocessed, stats)
        assert h.shape == (stats.encoding_dim + 1,)


class TestSliceSampling:
    def test_2d_sample_count_and_shared_conditioning(self, tiny_preprocessed):
        stats = NormalizationStats.from_records(tiny_preprocessed.patients, n_histology=7)
        tuples = enumerate_transitions(tiny_preprocessed, include_identity=True)
        tup = tuples[0]
        h = conditioning_for_tuple(tup, tiny_preprocessed, stats)
        samples = slice_samples_2d(tup, tiny_preprocessed, h)
        n_slices = tiny_preprocessed.load_volume(tup.input_ref).shape[2]
        assert len(samples) == n_slices
        assert all(s[2] is h for s in samples)

    def test_total_2d_samples_match_brute_force(self, tiny_preprocessed):
        stats = NormalizationStats.from_records(tiny_preprocessed.patients, n_histology=7)
        tuples = enumerate_transitions(tiny_preprocessed, include_identity=True)
        total = sum(
            len(slice_samples_2d(t, tiny_preprocessed, conditioning_for_tuple(t, tiny_preprocessed, stats)))
            for t in tuples
        )
        slices_per_patient = {
            p.patient_id: tiny_preprocessed.load_mask(p.ctv_mask_ref).shape[2] for p in tiny_preprocessed.patients
        }
        expected = sum(slices_per_patient[t.patient_id] for t in tuples)
        assert total == expected

    def test_triplet_window_rules(self):
        idx = triplet_indices(10)
        assert len(idx) == 10
        assert idx[0] == (0, 0, 1)
        assert idx[5] == (4, 5, 6)
        assert idx[9] == (8, 9, 9)
        with pytest.raises(ValueError):
            triplet_indices(2)

    def test_triplet_samples(self, tiny_preprocessed):
        stats = NormalizationStats.from_records(tiny_preprocessed.patients, n_histology=7)
        tup = enumerate_transitions(tiny_preprocessed, include_identity=False)[0]
        h = conditioning_for_tuple(tup, tiny_preprocessed, stats)
        samples = triplet_samples_25d(tup, tiny_preprocessed, h)
        x = tiny_preprocessed.load_volume(tup.input_ref).data
        assert len(samples) == x.shape[2]
        triplet, target, _, mask = samples[0]
        assert triplet.shape == (3, x.shape[0], x.shape[1])
        assert np.array_equal(triplet[0], triplet[1])  # clamped lower edge
        assert target.shape == x.shape[:2]
        assert mask.shape == x.shape[:2]


def test_export_round_trip(tmp_path, tiny_preprocessed):
    tuples = enumerate_transitions(tiny_preprocessed, include_identity=True)
    path = tmp_path / "tuples.jsonl"
    export_tuples(tuples, path)
    assert load_tuples(path) == tuples
