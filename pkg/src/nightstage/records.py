"""Night recordings, stage vocabulary, label mapping, and in-bed trimming."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

EPOCH_SEC = 30.0


class SleepStage(enum.IntEnum):
    """The five scored stages; N3 subsumes what older scoring calls N4."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


STAGE_NAMES = tuple(s.name for s in SleepStage)
NUM_STAGES = len(STAGE_NAMES)


class LabelError(ValueError):
    """A stage annotation could not be interpreted."""


class RecordingError(ValueError):
    """A night recording violates its structural contract."""


# Raw-label vocabulary: canonical names, common scorer aliases, and the
# "Sleep stage X" strings found in EDF+ annotation tracks.  MOVEMENT and
# UNKNOWN map to None (the epoch is excluded downstream); N4 merges into N3.
_ALIASES = {
    "w": SleepStage.W,
    "wake": SleepStage.W,
    "sleep stage w": SleepStage.W,
    "n1": SleepStage.N1,
    "1": SleepStage.N1,
    "s1": SleepStage.N1,
    "sleep stage 1": SleepStage.N1,
    "n2": SleepStage.N2,
    "2": SleepStage.N2,
    "s2": SleepStage.N2,
    "sleep stage 2": SleepStage.N2,
    "n3": SleepStage.N3,
    "3": SleepStage.N3,
    "s3": SleepStage.N3,
    "sleep stage 3": SleepStage.N3,
    "n4": SleepStage.N3,
    "4": SleepStage.N3,
    "s4": SleepStage.N3,
    "sleep stage 4": SleepStage.N3,
    "rem": SleepStage.REM,
    "r": SleepStage.REM,
    "sleep stage r": SleepStage.REM,
    "movement": None,
    "movement time": None,
    "sleep stage ?": None,
    "unknown": None,
    "?": None,
}


def map_stage(raw) -> SleepStage | None:
    """Map one raw annotation label to a SleepStage, or None if excluded."""
    if isinstance(raw, SleepStage):
        return raw
    key = str(raw).strip().lower()
    if key not in _ALIASES:
        raise LabelError(f"unrecognized stage label {raw!r}")
    return _ALIASES[key]


def map_stages(raw_labels) -> list[SleepStage | None]:
    """Vectorized :func:`map_stage`; order and length are preserved."""
    return [map_stage(r) for r in raw_labels]


@dataclass
class NightRecording:
    """One subject-night: a single-channel signal plus stage annotations.

    `signal` is in µV at `sample_rate` Hz.  `annotations` is a list of
    (onset_sec, duration_sec, raw_label) tuples relative to the start of
    `signal`.  `lights_off`/`lights_on` bound the in-bed period in seconds.
    """

    subject_id: str
    night_index: int
    signal: np.ndarray
    sample_rate: float
    annotations: list
    lights_off: float
    lights_on: float

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.sample_rate <= 0:
            raise RecordingError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.night_index < 1:
            raise RecordingError(f"night_index is 1-based, got {self.night_index}")

    @property
    def duration_sec(self) -> float:
        return self.signal.shape[0] / self.sample_rate

    @property
    def n_epochs(self) -> int:
        return int(self.duration_sec // EPOCH_SEC)


def trim_in_bed(rec: NightRecording) -> NightRecording:
    """Crop a recording to its in-bed window, whole 30 s epochs only.

    The kept window starts at `lights_off` and extends to the largest
    multiple of 30 s that fits before `lights_on`; a trailing partial epoch
    is dropped.  Annotations are clipped to the window and re-expressed
    relative to its start.
    """
    duration = rec.duration_sec
    if not (0 <= rec.lights_off < rec.lights_on <= duration + 1e-9):
        raise RecordingError(
            f"invalid in-bed window [{rec.lights_off}, {rec.lights_on}) "
            f"for a {duration:.1f} s recording"
        )
    window = min(rec.lights_on, duration) - rec.lights_off
    kept = int(window // EPOCH_SEC) * EPOCH_SEC
    if kept <= 0:
        raise RecordingError(
            f"in-bed window of {window:.1f} s holds no complete 30 s epoch"
        )
    start = int(round(rec.lights_off * rec.sample_rate))
    stop = start + int(round(kept * rec.sample_rate))
    clipped = []
    for onset, dur, label in rec.annotations:
        lo = max(onset, rec.lights_off)
        hi = min(onset + dur, rec.lights_off + kept)
        if hi - lo > 1e-9:
            clipped.append((lo - rec.lights_off, hi - lo, label))
    return replace(
        rec,
        signal=rec.signal[start:stop].copy(),
        annotations=clipped,
        lights_off=0.0,
        lights_on=kept,
    )


def stages_per_epoch(rec: NightRecording) -> list[SleepStage | None]:
    """Expand interval annotations into one (possibly absent) label per epoch.

    Annotation intervals must align to the 30 s grid and may not overlap;
    epochs not covered by any annotation are excluded (None), like epochs
    annotated as movement or unknown.
    """
    labels: list[SleepStage | None] = [None] * rec.n_epochs
    covered = [False] * rec.n_epochs
    for onset, dur, raw in rec.annotations:
        first = onset / EPOCH_SEC
        count = dur / EPOCH_SEC
        if abs(first - round(first)) > 1e-6 or abs(count - round(count)) > 1e-6:
            raise RecordingError(
                f"annotation ({onset}, {dur}, {raw!r}) is not aligned to the 30 s epoch grid"
            )
        stage = map_stage(raw)
        for k in range(int(round(first)), min(int(round(first + count)), rec.n_epochs)):
            if covered[k]:
                raise RecordingError(f"overlapping annotations at epoch {k}")
            covered[k] = True
            labels[k] = stage
    return labels
