import numpy as np
import pytest

from nightstage import edf
from nightstage.records import (
    LabelError,
    NightRecording,
    RecordingError,
    SleepStage,
    map_stages,
    stages_per_epoch,
    trim_in_bed,
)


def make_rec(duration_sec=120.0, fs=100.0, lights=None, annotations=None, seed=0):
    rng = np.random.default_rng(seed)
    n = int(duration_sec * fs)
    lights_off, lights_on = lights if lights else (0.0, duration_sec)
    return NightRecording(
        subject_id="s01",
        night_index=1,
        signal=rng.normal(scale=20.0, size=n),
        sample_rate=fs,
        annotations=annotations or [],
        lights_off=lights_off,
        lights_on=lights_on,
    )


class TestStageMapping:
    def test_merge_and_exclusion(self):
        out = map_stages(["W", "N4", "MOVEMENT", "REM"])
        assert out == [SleepStage.W, SleepStage.N3, None, SleepStage.REM]

    def test_edf_plus_style_labels(self):
        out = map_stages(
            ["Sleep stage W", "Sleep stage 1", "Sleep stage 4", "Sleep stage R", "Sleep stage ?"]
        )
        assert out == [SleepStage.W, SleepStage.N1, SleepStage.N3, SleepStage.REM, None]

    def test_identity_and_empty(self):
        assert map_stages(["W"] * 5) == [SleepStage.W] * 5
        assert map_stages([]) == []

    def test_unknown_label_named_in_error(self):
        with pytest.raises(LabelError, match="NREM9"):
            map_stages(["NREM9"])


class TestTrimInBed:
    def test_eight_hour_night(self):
        rec = make_rec(duration_sec=28800.0, lights=(1800.0, 27000.0))
        out = trim_in_bed(rec)
        assert out.duration_sec == 25200.0
        assert out.n_epochs == 840
        assert out.lights_off == 0.0 and out.lights_on == 25200.0

    def test_full_window_is_identity(self):
        rec = make_rec(duration_sec=120.0)
        out = trim_in_bed(rec)
        np.testing.assert_array_equal(out.signal, rec.signal)

    def test_partial_epoch_dropped(self):
        rec = make_rec(duration_sec=100.0, lights=(0.0, 95.0))
        out = trim_in_bed(rec)
        assert out.n_epochs == 3 and out.duration_sec == 90.0

    def test_empty_window_errors(self):
        rec = make_rec(duration_sec=100.0, lights=(10.0, 25.0))
        with pytest.raises(RecordingError, match="no complete"):
            trim_in_bed(rec)

    def test_annotations_shifted_and_clipped(self):
        ann = [(0.0, 60.0, "W"), (60.0, 60.0, "N1"), (120.0, 30.0, "N2")]
        rec = make_rec(duration_sec=150.0, lights=(30.0, 150.0), annotations=ann)
        out = trim_in_bed(rec)
        assert out.annotations == [(0.0, 30.0, "W"), (30.0, 60.0, "N1"), (90.0, 30.0, "N2")]


class TestStagesPerEpoch:
    def test_expansion(self):
        ann = [(0.0, 60.0, "W"), (60.0, 30.0, "MOVEMENT"), (90.0, 30.0, "REM")]
        rec = make_rec(duration_sec=120.0, annotations=ann)
        assert stages_per_epoch(rec) == [SleepStage.W, SleepStage.W, None, SleepStage.REM]

    def test_misaligned_annotation_errors(self):
        rec = make_rec(duration_sec=120.0, annotations=[(7.0, 30.0, "W")])
        with pytest.raises(RecordingError, match="not aligned"):
            stages_per_epoch(rec)

    def test_overlap_errors(self):
        rec = make_rec(duration_sec=120.0, annotations=[(0.0, 60.0, "W"), (30.0, 30.0, "N1")])
        with pytest.raises(RecordingError, match="overlapping"):
            stages_per_epoch(rec)

    def test_uncovered_epochs_are_excluded(self):
        rec = make_rec(duration_sec=120.0, annotations=[(30.0, 30.0, "N2")])
        assert stages_per_epoch(rec) == [None, SleepStage.N2, None, None]


class TestEdfRoundTrip:
    def test_constant_midrange_signal(self, tmp_path):
        path = tmp_path / "flat.edf"
        edf.write_edf(path, np.zeros(500), 100, gain=0.01)
        parsed = edf.read_edf(path)
        # digital midpoint of a symmetric range maps back to ~0 physical
        assert np.all(parsed.digital == 0)
        np.testing.assert_allclose(parsed.signal, 0.0, atol=1e-9)
        assert parsed.sample_rate == 100.0

    def test_quantized_signal_roundtrips_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        raw = rng.normal(scale=40.0, size=3000)
        path = tmp_path / "night.edf"
        edf.write_edf(path, raw, 100)
        first = edf.read_edf(path)
        # writing the parsed physical values again must reproduce the file
        path2 = tmp_path / "again.edf"
        edf.write_edf(path2, first.signal, 100)
        second = edf.read_edf(path2)
        np.testing.assert_array_equal(first.digital, second.digital)
        assert first.signal.tobytes() == second.signal.tobytes()
        assert path.read_bytes() == path2.read_bytes()

    def test_gain_ladder_covers_amplitude(self, tmp_path):
        big = np.full(100, 2000.0)
        path = tmp_path / "big.edf"
        edf.write_edf(path, big, 100)
        parsed = edf.read_edf(path)
        np.testing.assert_allclose(parsed.signal, 2000.0, atol=0.1)

    def test_annotations_embedded_as_tals(self, tmp_path):
        ann = [(0.0, 30.0, "Sleep stage W"), (30.0, 30.0, "Sleep stage R")]
        path = tmp_path / "ann.edf"
        edf.write_edf(path, np.zeros(200), 100, annotations=ann)
        parsed = edf.read_edf(path)
        assert parsed.annotations == ann

    def test_channel_selection_and_missing_channel(self, tmp_path):
        path = tmp_path / "ch.edf"
        edf.write_edf(path, np.ones(100), 100, channel_label="EEG Fpz-Cz")
        parsed = edf.read_edf(path, channel="EEG Fpz-Cz")
        assert parsed.channel_label == "EEG Fpz-Cz"
        with pytest.raises(edf.EdfFormatError, match="EEG Fpz-Cz"):
            edf.read_edf(path, channel="EMG")

    def test_truncated_data_section(self, tmp_path):
        path = tmp_path / "trunc.edf"
        edf.write_edf(path, np.zeros(500), 100)
        blob = path.read_bytes()
        with pytest.raises(edf.EdfFormatError, match="truncated"):
            edf.parse_edf(blob[:-10])

    def test_malformed_header_reports_offset(self):
        blob = bytearray(b" " * 256)
        blob[0:8] = b"0       "
        # header-size field (offset 184) is not a number
        with pytest.raises(edf.EdfFormatError, match="offset 184"):
            edf.parse_edf(bytes(blob))

    def test_non_integer_record_count_rejected(self, tmp_path):
        with pytest.raises(edf.EdfFormatError, match="whole number"):
            edf.write_edf(tmp_path / "x.edf", np.zeros(150), 100)


class TestSidecars:
    def test_annotation_csv_roundtrip(self, tmp_path):
        ann = [(0.0, 30.0, "Sleep stage W"), (30.0, 60.0, "Sleep stage 2")]
        path = tmp_path / "a.annotations.csv"
        edf.write_annotations_csv(path, ann)
        assert edf.read_annotations_csv(path) == ann
        header = path.read_text().splitlines()[0]
        assert header == "onset_sec,duration_sec,label"

    def test_csv_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,W\n")
        with pytest.raises(edf.EdfFormatError, match="onset_sec"):
            edf.read_annotations_csv(path)

    def test_save_and_load_night(self, tmp_path):
        ann = [(0.0, 60.0, "W"), (60.0, 60.0, "N2")]
        rec = make_rec(duration_sec=120.0, annotations=ann, seed=9)
        paths = edf.save_night(tmp_path, rec)
        assert paths["edf"].name == "s01_n1.edf"
        loaded = edf.load_night(paths["edf"])
        assert loaded.subject_id == "s01" and loaded.night_index == 1
        assert loaded.annotations == ann
        assert loaded.lights_off == 0.0 and loaded.lights_on == 120.0
        # physics round-trip is at quantized resolution
        assert np.max(np.abs(loaded.signal - rec.signal)) <= 0.005 + 1e-12

    def test_load_night_falls_back_to_tals(self, tmp_path):
        ann = [(0.0, 30.0, "Sleep stage W")]
        path = tmp_path / "solo.edf"
        edf.write_edf(path, np.zeros(3000), 100, annotations=ann)
        rec = edf.load_night(path)
        assert rec.annotations == ann
        assert rec.subject_id == "solo"
        assert rec.lights_on == 30.0
