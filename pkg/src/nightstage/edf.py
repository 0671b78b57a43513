"""European Data Format (EDF) reading and writing for night recordings.

Covers the subset this pipeline needs: the 256-byte ASCII main header,
256-byte per-signal headers, 16-bit little-endian sample records, affine
digital→physical rescaling, and just enough EDF+ time-stamped annotation
(TAL) handling to carry stage labels inside the file.  A sidecar CSV
(`onset_sec,duration_sec,label`, UTF-8) is the canonical annotation format;
subject identity and the in-bed window travel in a small JSON sidecar.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import NightRecording

DIG_MIN, DIG_MAX = -32768, 32767
# Candidate quantization steps (µV per digital unit); the writer picks the
# finest one whose physical range covers the signal.
_GAIN_LADDER = (0.001, 0.01, 0.1, 1.0, 10.0)


class EdfFormatError(ValueError):
    """The byte stream does not follow the EDF layout."""


@dataclass
class ParsedEdf:
    """One extracted channel plus file-level metadata."""

    signal: np.ndarray  # physical units (µV), float64
    digital: np.ndarray  # raw int16 samples of the channel
    sample_rate: float
    channel_label: str
    annotations: list  # (onset_sec, duration_sec, label) from EDF+ TALs
    header: dict


def _take(data: bytes, offset: int, width: int):
    if offset + width > len(data):
        raise EdfFormatError(
            f"header truncated: needed {width} bytes at byte offset {offset}, "
            f"file has {len(data)}"
        )
    return data[offset : offset + width].decode("latin-1"), offset + width


def _take_num(data, offset, width, cast, what):
    raw, end = _take(data, offset, width)
    try:
        return cast(raw.strip()), end
    except ValueError as err:
        raise EdfFormatError(
            f"malformed {what} field {raw!r} at byte offset {offset}"
        ) from err


def parse_edf(data: bytes, channel: str | None = None) -> ParsedEdf:
    """Parse EDF bytes and extract one data channel.

    `channel` selects a signal by its (stripped) label; when None the first
    non-annotation signal is used.  Physical values follow
    ``(digital - dig_min) * (phys_max - phys_min) / (dig_max - dig_min) + phys_min``.
    """
    off = 0
    header = {}
    header["version"], off = _take(data, off, 8)
    header["patient"], off = _take(data, off, 80)
    header["recording"], off = _take(data, off, 80)
    header["start_date"], off = _take(data, off, 8)
    header["start_time"], off = _take(data, off, 8)
    header_bytes, off = _take_num(data, off, 8, int, "header size")
    header["reserved"], off = _take(data, off, 44)
    n_records, off = _take_num(data, off, 8, int, "record count")
    record_duration, off = _take_num(data, off, 8, float, "record duration")
    ns, off = _take_num(data, off, 4, int, "signal count")
    if ns <= 0:
        raise EdfFormatError(f"file declares {ns} signals")

    def column(width, cast=None, what="signal header"):
        nonlocal off
        vals = []
        for _ in range(ns):
            if cast is None:
                v, off = _take(data, off, width)
                vals.append(v.strip())
            else:
                v, off = _take_num(data, off, width, cast, what)
                vals.append(v)
        return vals

    labels = column(16)
    column(80)  # transducer
    units = column(8)
    phys_min = column(8, float, "physical minimum")
    phys_max = column(8, float, "physical maximum")
    dig_min = column(8, int, "digital minimum")
    dig_max = column(8, int, "digital maximum")
    column(80)  # prefiltering
    samples = column(8, int, "samples per record")
    column(32)  # reserved
    if off != header_bytes:
        raise EdfFormatError(
            f"header declares {header_bytes} bytes but fields end at offset {off}"
        )

    record_bytes = 2 * sum(samples)
    expected = header_bytes + n_records * record_bytes
    if len(data) < expected:
        raise EdfFormatError(
            f"data section truncated: expected {expected} bytes "
            f"({n_records} records of {record_bytes}), file has {len(data)}"
        )

    data_signals = [i for i, lab in enumerate(labels) if lab != "EDF Annotations"]
    if channel is None:
        if not data_signals:
            raise EdfFormatError("file contains only annotation signals")
        idx = data_signals[0]
    else:
        matches = [i for i in data_signals if labels[i] == channel.strip()]
        if not matches:
            available = [labels[i] for i in data_signals]
            raise EdfFormatError(f"channel {channel!r} not found; available: {available}")
        idx = matches[0]
    if dig_max[idx] <= dig_min[idx] or phys_max[idx] == phys_min[idx]:
        raise EdfFormatError(
            f"degenerate calibration for channel {labels[idx]!r}: "
            f"digital [{dig_min[idx]}, {dig_max[idx]}], "
            f"physical [{phys_min[idx]}, {phys_max[idx]}]"
        )

    raw = np.frombuffer(data, dtype="<i2", offset=header_bytes, count=n_records * sum(samples))
    per_record = raw.reshape(n_records, sum(samples))
    starts = np.cumsum([0] + samples)
    digital = per_record[:, starts[idx] : starts[idx + 1]].reshape(-1)
    gain = (phys_max[idx] - phys_min[idx]) / (dig_max[idx] - dig_min[idx])
    signal = (digital.astype(np.float64) - dig_min[idx]) * gain + phys_min[idx]

    annotations = []
    for i, lab in enumerate(labels):
        if lab == "EDF Annotations":
            blob = per_record[:, starts[i] : starts[i + 1]].reshape(-1).tobytes()
            annotations.extend(_parse_tals(blob))

    if record_duration <= 0:
        raise EdfFormatError(f"nonpositive record duration {record_duration}")
    header.update(labels=labels, units=units, n_records=n_records, record_duration=record_duration)
    return ParsedEdf(
        signal=signal,
        digital=digital.copy(),
        sample_rate=samples[idx] / record_duration,
        channel_label=labels[idx],
        annotations=annotations,
        header=header,
    )


def _parse_tals(blob: bytes):
    """Extract (onset, duration, label) triples from a TAL byte stream.

    Time-keeping TALs (empty label) and zero padding are skipped; a TAL with
    several label fields yields one triple per label.
    """
    out = []
    for chunk in blob.split(b"\x00"):
        if not chunk:
            continue
        parts = chunk.decode("utf-8", errors="replace").split(chr(20))
        timing = parts[0].split(chr(21))
        try:
            onset = float(timing[0])
        except ValueError:
            continue
        duration = float(timing[1]) if len(timing) > 1 and timing[1] else 0.0
        for label in parts[1:]:
            if label:
                out.append((onset, duration, label))
    return out


def read_edf(path, channel: str | None = None) -> ParsedEdf:
    return parse_edf(Path(path).read_bytes(), channel=channel)


def _field(text: str, width: int) -> bytes:
    s = str(text)
    if len(s) > width:
        raise EdfFormatError(f"field {s!r} exceeds {width} ASCII characters")
    return s.ljust(width).encode("latin-1")


def _pick_gain(signal: np.ndarray) -> float:
    peak = float(np.max(np.abs(signal))) if signal.size else 0.0
    for gain in _GAIN_LADDER:
        if peak <= DIG_MAX * gain:
            return gain
    raise EdfFormatError(f"signal peak {peak:.1f} µV exceeds the writable range")


def quantize(signal: np.ndarray, gain: float) -> np.ndarray:
    """Round physical values to the int16 grid used by :func:`write_edf`."""
    return np.clip(np.rint(np.asarray(signal) / gain), DIG_MIN, DIG_MAX).astype(np.int16)


def write_edf(
    path,
    signal: np.ndarray,
    sample_rate: float,
    channel_label: str = "EEG Fpz-Cz",
    gain: float | None = None,
    annotations: list | None = None,
    patient: str = "X",
    recording: str = "X",
) -> None:
    """Write a single-channel EDF file (plus an EDF+ annotation signal if
    `annotations` is given).

    The signal is quantized with step `gain` µV (auto-selected from a fixed
    ladder when None) over the symmetric digital range; reading the file
    back reproduces the quantized values exactly.  One-second records; the
    signal length must be a whole number of records.  Date/time fields are
    fixed so identical inputs produce identical bytes.
    """
    signal = np.asarray(signal, dtype=np.float64)
    fs = int(round(sample_rate))
    if abs(fs - sample_rate) > 1e-9 or fs <= 0:
        raise EdfFormatError(f"sample rate must be a positive integer Hz, got {sample_rate}")
    if signal.size % fs != 0:
        raise EdfFormatError(
            f"signal length {signal.size} is not a whole number of 1 s records at {fs} Hz"
        )
    n_records = signal.size // fs
    if n_records == 0:
        raise EdfFormatError("empty signal")
    if gain is None:
        gain = _pick_gain(signal)
    digital = quantize(signal, gain)
    phys_min, phys_max = DIG_MIN * gain, DIG_MAX * gain

    ann_records = None
    if annotations is not None:
        ann_records = _build_tal_records(annotations, n_records)
    ns = 1 if ann_records is None else 2
    ann_width = len(ann_records[0]) // 2 if ann_records is not None else 0

    head = b"".join(
        [
            _field("0", 8),
            _field(patient, 80),
            _field(recording, 80),
            _field("01.01.00", 8),
            _field("00.00.00", 8),
            _field(str(256 * (ns + 1)), 8),
            _field("EDF+C" if ann_records is not None else "", 44),
            _field(str(n_records), 8),
            _field("1", 8),
            _field(str(ns), 4),
        ]
    )

    def sig_column(width, values):
        return b"".join(_field(v, width) for v in values)

    labels = [channel_label] + (["EDF Annotations"] if ns == 2 else [])
    sig_head = b"".join(
        [
            sig_column(16, labels),
            sig_column(80, [""] * ns),
            sig_column(8, ["uV"] + ([""] if ns == 2 else [])),
            sig_column(8, [f"{phys_min:g}"] + (["-1"] if ns == 2 else [])),
            sig_column(8, [f"{phys_max:g}"] + (["1"] if ns == 2 else [])),
            sig_column(8, [str(DIG_MIN)] * ns),
            sig_column(8, [str(DIG_MAX)] * ns),
            sig_column(80, [""] * ns),
            sig_column(8, [str(fs)] + ([str(ann_width)] if ns == 2 else [])),
            sig_column(32, [""] * ns),
        ]
    )

    chunks = [head, sig_head]
    samples = digital.reshape(n_records, fs)
    for r in range(n_records):
        chunks.append(samples[r].astype("<i2").tobytes())
        if ann_records is not None:
            chunks.append(ann_records[r])
    Path(path).write_bytes(b"".join(chunks))


def _build_tal_records(annotations, n_records: int):
    """Pack all annotation TALs into record 0; later records carry only the
    mandatory time-keeping TAL.  Records are padded to a common even size."""

    def tal(onset, duration=None, label=""):
        s = f"{'+' if onset >= 0 else ''}{onset:g}"
        if duration is not None:
            s += chr(21) + f"{duration:g}"
        return (s + chr(20) + label + chr(20)).encode("utf-8") + b"\x00"

    records = []
    for r in range(n_records):
        payload = tal(float(r))
        if r == 0:
            for onset, duration, label in annotations:
                payload += tal(float(onset), float(duration), str(label))
        records.append(payload)
    width = max(len(p) for p in records)
    width += width % 2
    return [p.ljust(width, b"\x00") for p in records]


# -- sidecar files -----------------------------------------------------------


def write_annotations_csv(path, annotations) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["onset_sec", "duration_sec", "label"])
        for onset, duration, label in annotations:
            writer.writerow([f"{float(onset):g}", f"{float(duration):g}", str(label)])


def read_annotations_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["onset_sec", "duration_sec", "label"]:
            raise EdfFormatError(
                f"{path}: expected header 'onset_sec,duration_sec,label', got {header}"
            )
        return [(float(row[0]), float(row[1]), row[2]) for row in reader if row]


def night_paths(directory, stem: str) -> dict:
    base = Path(directory) / stem
    return {
        "edf": base.with_suffix(".edf"),
        "csv": base.with_suffix(".annotations.csv"),
        "meta": base.with_suffix(".meta.json"),
    }


def save_night(directory, rec: NightRecording, channel_label: str = "EEG Fpz-Cz") -> dict:
    """Write one recording as EDF + annotation CSV + metadata JSON.

    Returns the path map.  The stem is ``<subject>_n<night>``.
    """
    paths = night_paths(directory, f"{rec.subject_id}_n{rec.night_index}")
    write_edf(paths["edf"], rec.signal, rec.sample_rate, channel_label=channel_label)
    write_annotations_csv(paths["csv"], rec.annotations)
    meta = {
        "subject_id": rec.subject_id,
        "night_index": rec.night_index,
        "lights_off_sec": rec.lights_off,
        "lights_on_sec": rec.lights_on,
    }
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def load_night(
    edf_path,
    channel: str | None = None,
    subject_id: str | None = None,
    night_index: int | None = None,
    lights_off: float | None = None,
    lights_on: float | None = None,
) -> NightRecording:
    """Build a NightRecording from an EDF file and its sidecars.

    Annotations come from `<stem>.annotations.csv` when present, else from
    EDF+ TALs.  Identity and the in-bed window come from `<stem>.meta.json`
    unless overridden; without either, lights default to the full duration
    and the subject id to the file stem.
    """
    edf_path = Path(edf_path)
    parsed = read_edf(edf_path, channel=channel)

    csv_path = edf_path.with_suffix(".annotations.csv")
    annotations = read_annotations_csv(csv_path) if csv_path.exists() else parsed.annotations

    meta_path = edf_path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    duration = parsed.signal.size / parsed.sample_rate
    return NightRecording(
        subject_id=subject_id or meta.get("subject_id", edf_path.stem),
        night_index=night_index or int(meta.get("night_index", 1)),
        signal=parsed.signal,
        sample_rate=parsed.sample_rate,
        annotations=annotations,
        lights_off=lights_off if lights_off is not None else float(meta.get("lights_off_sec", 0.0)),
        lights_on=lights_on if lights_on is not None else float(meta.get("lights_on_sec", duration)),
    )
