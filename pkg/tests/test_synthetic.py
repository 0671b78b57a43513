import numpy as np
import pytest
from scipy.signal import periodogram

from nightstage.records import (
    EPOCH_SEC,
    NUM_STAGES,
    STAGE_NAMES,
    SleepStage,
    map_stages,
    stages_per_epoch,
    trim_in_bed,
)
from nightstage.synthetic import (
    CohortSpec,
    StageTemplate,
    SynthesisError,
    generate_synthetic_cohort,
    transition_matrix,
)


def small_spec(**overrides):
    defaults = dict(n_subjects=2, nights_per_subject=2, epochs_per_night=30, sequence_length=10)
    defaults.update(overrides)
    return CohortSpec(**defaults)


class TestCohortSpec:
    def test_too_few_epochs_for_a_sequence(self):
        with pytest.raises(SynthesisError, match="cannot form a single training sequence"):
            CohortSpec(epochs_per_night=15, sequence_length=20)

    def test_single_night_subjects_rejected(self):
        with pytest.raises(SynthesisError, match="nights_per_subject"):
            CohortSpec(nights_per_subject=1)

    def test_missing_template_named(self):
        templates = {s: StageTemplate(peaks=((5.0, 1.0, 1.0),)) for s in SleepStage if s != SleepStage.REM}
        with pytest.raises(SynthesisError, match="REM"):
            CohortSpec(templates=templates)

    def test_label_noise_range(self):
        with pytest.raises(SynthesisError, match="label_noise"):
            CohortSpec(label_noise=1.5)


class TestTransitionMatrix:
    def test_rows_are_distributions(self):
        mat = transition_matrix(0.85)
        np.testing.assert_allclose(mat.sum(axis=1), np.ones(NUM_STAGES))
        assert np.all(mat >= 0)

    def test_self_transitions_and_ladder_structure(self):
        mat = transition_matrix(0.85)
        np.testing.assert_allclose(np.diag(mat), 0.85)
        # end stages feed their single neighbour the whole remainder
        assert mat[0, 1] == pytest.approx(0.15)
        assert mat[4, 3] == pytest.approx(0.15)
        # interior stages split it
        assert mat[2, 1] == pytest.approx(0.075)
        assert mat[2, 3] == pytest.approx(0.075)
        # no long-range jumps
        assert mat[0, 3] == 0.0 and mat[1, 4] == 0.0


class TestGenerateCohort:
    def test_cohort_shape_and_durations(self):
        spec = CohortSpec(n_subjects=10, nights_per_subject=2, epochs_per_night=200)
        cohort = generate_synthetic_cohort(spec, seed=3)
        assert len(cohort) == 20
        for rec in cohort:
            assert rec.duration_sec == pytest.approx(6000.0)
            assert rec.signal.size == 600_000
            assert rec.sample_rate == 100.0
        assert [r.subject_id for r in cohort[:4]] == ["s01", "s01", "s02", "s02"]
        assert [r.night_index for r in cohort[:4]] == [1, 2, 1, 2]

    def test_same_seed_is_bit_identical(self):
        spec = small_spec()
        a = generate_synthetic_cohort(spec, seed=11)
        b = generate_synthetic_cohort(spec, seed=11)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.signal, rb.signal)
            assert ra.annotations == rb.annotations

    def test_different_seeds_differ(self):
        spec = small_spec()
        a = generate_synthetic_cohort(spec, seed=11)
        b = generate_synthetic_cohort(spec, seed=12)
        assert not np.array_equal(a[0].signal, b[0].signal)

    def test_annotations_tile_the_night(self):
        spec = small_spec(epochs_per_night=60)
        for rec in generate_synthetic_cohort(spec, seed=5):
            cursor = 0.0
            for onset, dur, label in rec.annotations:
                assert onset == pytest.approx(cursor)
                assert dur % EPOCH_SEC == 0.0
                assert label in STAGE_NAMES
                cursor = onset + dur
            assert cursor == pytest.approx(rec.duration_sec)
            # runs are maximal: consecutive entries never share a label
            labels = [a[2] for a in rec.annotations]
            assert all(x != y for x, y in zip(labels, labels[1:]))

    def test_recordings_feed_the_ingest_path(self):
        spec = small_spec(epochs_per_night=40)
        rec = generate_synthetic_cohort(spec, seed=7)[0]
        stages = stages_per_epoch(trim_in_bed(rec))
        assert len(stages) == 40
        assert all(s is not None for s in stages)

    def test_all_stages_visited_in_long_night(self):
        spec = CohortSpec(n_subjects=1, epochs_per_night=200)
        rec = generate_synthetic_cohort(spec, seed=0)[0]
        seen = {map_stages([a[2]])[0] for a in rec.annotations}
        assert seen == set(SleepStage)

    def test_n3_epochs_peak_in_delta_band(self):
        spec = CohortSpec(
            n_subjects=1,
            epochs_per_night=120,
            shift_std=0.0,
            gain_log_std=0.0,
            night_shift_jitter=0.0,
            night_gain_jitter=0.0,
            epoch_shift_jitter=0.0,
        )
        rec = generate_synthetic_cohort(spec, seed=1)[0]
        stages = stages_per_epoch(rec)
        n = int(EPOCH_SEC * rec.sample_rate)
        spectra = []
        for i, stage in enumerate(stages):
            if stage == SleepStage.N3:
                freqs, pxx = periodogram(rec.signal[i * n : (i + 1) * n], fs=rec.sample_rate)
                spectra.append(pxx)
        assert len(spectra) >= 3
        mean_pxx = np.mean(spectra, axis=0)
        peak_hz = freqs[np.argmax(mean_pxx)]
        assert 1.0 <= peak_hz <= 2.0

    def test_label_noise_corrupts_annotations_only(self):
        clean = generate_synthetic_cohort(small_spec(label_noise=0.0), seed=9)[0]
        noisy = generate_synthetic_cohort(small_spec(label_noise=0.5), seed=9)[0]
        clean_stages = stages_per_epoch(clean)
        noisy_stages = stages_per_epoch(noisy)
        assert clean_stages != noisy_stages
        assert all(s in set(SleepStage) for s in noisy_stages)

    def test_within_subject_spectra_closer_than_across(self):
        # statistical identity property; must hold for >= 95% of seeds
        hits = 0
        seeds = range(20)
        for seed in seeds:
            spec = CohortSpec(n_subjects=4, epochs_per_night=40, sequence_length=10)
            cohort = generate_synthetic_cohort(spec, seed=seed)
            profiles = []
            for rec in cohort:
                n = int(EPOCH_SEC * rec.sample_rate)
                epochs = rec.signal.reshape(-1, n)
                _, pxx = periodogram(epochs, fs=rec.sample_rate, axis=1)
                profiles.append(np.log(pxx.mean(axis=0) + 1e-12))
            within, across = [], []
            for i in range(len(cohort)):
                for j in range(i + 1, len(cohort)):
                    d = float(np.linalg.norm(profiles[i] - profiles[j]))
                    if cohort[i].subject_id == cohort[j].subject_id:
                        within.append(d)
                    else:
                        across.append(d)
            if np.mean(within) < np.mean(across):
                hits += 1
        assert hits >= 19
