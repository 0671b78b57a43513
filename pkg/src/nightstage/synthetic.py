"""Synthetic night-recording cohorts with controllable subject identity.

Each subject carries a private spectral fingerprint -- a frequency shift and
an amplitude gain drawn once per subject -- that is applied to every night
they contribute, so nights of the same subject are statistically closer than
nights of different subjects.  Night- and epoch-level jitters add smaller
within-subject variation on top.  Stage sequences follow a self-sticky
Markov chain over the W-N1-N2-N3-REM ladder, giving bout-structured
hypnograms rather than independently shuffled epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .records import EPOCH_SEC, NUM_STAGES, STAGE_NAMES, NightRecording, SleepStage


class SynthesisError(Exception):
    """Raised when a cohort specification is unusable."""


@dataclass(frozen=True)
class StageTemplate:
    """Spectral envelope of one stage: Gaussian peaks over a white floor.

    Each peak is a ``(center_hz, width_hz, power)`` triple; ``floor`` is the
    broadband amplitude added across the whole band.
    """

    peaks: tuple[tuple[float, float, float], ...]
    floor: float = 0.25


DEFAULT_TEMPLATES: dict[SleepStage, StageTemplate] = {
    SleepStage.W: StageTemplate(peaks=((10.0, 1.5, 1.2),), floor=0.30),
    SleepStage.N1: StageTemplate(peaks=((6.5, 2.0, 0.8),), floor=0.30),
    SleepStage.N2: StageTemplate(peaks=((13.5, 1.0, 1.0), (2.5, 1.5, 0.6)), floor=0.25),
    SleepStage.N3: StageTemplate(peaks=((1.5, 0.8, 1.6),), floor=0.15),
    SleepStage.REM: StageTemplate(peaks=((7.5, 2.5, 0.9),), floor=0.35),
}

# Shifted peak centers are clamped here so a large negative subject shift
# cannot push a template below DC and silently whiten the stage.
MIN_PEAK_HZ = 0.5


@dataclass
class CohortSpec:
    """Knobs for :func:`generate_synthetic_cohort`.

    ``shift_std``/``gain_log_std`` control how far apart subjects sit in
    spectrum space; the jitter fields control how much two nights of the
    same subject disagree.  ``shift_range``, when set, replaces the Gaussian
    shift draw with ``Uniform(lo, hi)`` — pinning the interval away from
    zero guarantees every subject a strong displacement, which a Gaussian
    draw cannot.  ``label_noise`` corrupts the written annotations (the
    signal always follows the true stage), mimicking scorer error.
    """

    n_subjects: int = 10
    nights_per_subject: int = 2
    epochs_per_night: int = 200
    sample_rate: float = 100.0
    sequence_length: int = 20
    templates: dict[SleepStage, StageTemplate] = field(
        default_factory=lambda: dict(DEFAULT_TEMPLATES)
    )
    shift_std: float = 1.0
    shift_range: tuple[float, float] | None = None
    gain_log_std: float = 0.2
    night_shift_jitter: float = 0.1
    night_gain_jitter: float = 0.05
    epoch_shift_jitter: float = 0.05
    rms_uv: float = 30.0
    self_transition: float = 0.85
    label_noise: float = 0.0
    subject_prefix: str = "s"

    def __post_init__(self) -> None:
        if self.n_subjects < 1:
            raise SynthesisError("n_subjects must be at least 1")
        if self.nights_per_subject < 2:
            raise SynthesisError("nights_per_subject must be at least 2")
        if self.sample_rate <= 0:
            raise SynthesisError("sample_rate must be positive")
        if self.epochs_per_night < self.sequence_length:
            raise SynthesisError(
                f"epochs_per_night={self.epochs_per_night} is smaller than "
                f"sequence_length={self.sequence_length}: cannot form a single "
                "training sequence"
            )
        if not 0.0 < self.self_transition <= 1.0:
            raise SynthesisError("self_transition must be in (0, 1]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise SynthesisError("label_noise must be in [0, 1]")
        if self.shift_range is not None:
            lo, hi = self.shift_range
            if not lo <= hi:
                raise SynthesisError(f"shift_range must satisfy lo <= hi, got ({lo}, {hi})")
        missing = [s.name for s in SleepStage if s not in self.templates]
        if missing:
            raise SynthesisError(f"templates missing stages: {missing}")


def transition_matrix(self_transition: float = 0.85) -> np.ndarray:
    """Stage-transition chain: sticky self-loops, with the remaining mass
    split evenly between the neighbouring stages on the W-N1-N2-N3-REM
    ladder (end stages have a single neighbour)."""
    mat = np.zeros((NUM_STAGES, NUM_STAGES))
    for i in range(NUM_STAGES):
        neighbours = [j for j in (i - 1, i + 1) if 0 <= j < NUM_STAGES]
        mat[i, i] = self_transition
        for j in neighbours:
            mat[i, j] = (1.0 - self_transition) / len(neighbours)
    return mat


def corrupt_labels(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Replace ``fraction`` of the labels with uniform draws over the four
    *other* stages; a corrupted epoch never keeps its true stage."""
    if not 0.0 <= fraction <= 1.0:
        raise SynthesisError("fraction must be in [0, 1]")
    labels = np.asarray(labels)
    flip = rng.random(labels.size) < fraction
    draws = rng.integers(0, NUM_STAGES - 1, size=labels.size)
    noisy = draws + (draws >= labels)
    out = labels.copy()
    out[flip] = noisy[flip]
    return out


def _sample_stages(rng: np.random.Generator, n_epochs: int, mat: np.ndarray) -> np.ndarray:
    stages = np.empty(n_epochs, dtype=np.int64)
    state = int(SleepStage.W)
    for i in range(n_epochs):
        stages[i] = state
        state = int(rng.choice(NUM_STAGES, p=mat[state]))
    return stages


def _epoch_signal(
    rng: np.random.Generator,
    template: StageTemplate,
    shift: float,
    freqs: np.ndarray,
    n_samples: int,
    rms_target: float,
) -> np.ndarray:
    """Band-shaped Gaussian noise: envelope x white complex spectrum."""
    envelope = np.full(freqs.shape, template.floor)
    for center, width, power in template.peaks:
        c = max(MIN_PEAK_HZ, center + shift)
        envelope += power * np.exp(-0.5 * ((freqs - c) / width) ** 2)
    envelope[0] = 0.0  # keep the signal zero-mean
    spectrum = envelope * (rng.normal(size=freqs.size) + 1j * rng.normal(size=freqs.size))
    x = np.fft.irfft(spectrum, n=n_samples)
    rms = float(np.sqrt(np.mean(x * x)))
    return x * (rms_target / rms)


def _runs_to_annotations(labels: np.ndarray) -> list[tuple[float, float, str]]:
    annotations = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            annotations.append(
                (start * EPOCH_SEC, (i - start) * EPOCH_SEC, STAGE_NAMES[labels[start]])
            )
            start = i
    return annotations


def _generate_night(
    rng: np.random.Generator,
    spec: CohortSpec,
    subject_id: str,
    night_index: int,
    subject_shift: float,
    subject_gain: float,
    mat: np.ndarray,
    freqs: np.ndarray,
    n_samples: int,
) -> NightRecording:
    night_shift = subject_shift + rng.normal(0.0, spec.night_shift_jitter)
    night_gain = subject_gain * float(np.exp(rng.normal(0.0, spec.night_gain_jitter)))

    true_stages = _sample_stages(rng, spec.epochs_per_night, mat)
    labels = true_stages.copy()
    if spec.label_noise > 0.0:
        labels = corrupt_labels(true_stages, spec.label_noise, rng)

    epochs = []
    for stage in true_stages:
        epoch_shift = night_shift + rng.normal(0.0, spec.epoch_shift_jitter)
        epochs.append(
            _epoch_signal(
                rng,
                spec.templates[SleepStage(int(stage))],
                epoch_shift,
                freqs,
                n_samples,
                spec.rms_uv * night_gain,
            )
        )
    signal = np.concatenate(epochs)
    duration = spec.epochs_per_night * EPOCH_SEC
    return NightRecording(
        subject_id=subject_id,
        night_index=night_index,
        signal=signal,
        sample_rate=spec.sample_rate,
        annotations=_runs_to_annotations(labels),
        lights_off=0.0,
        lights_on=duration,
    )


def generate_synthetic_cohort(spec: CohortSpec, seed: int) -> list[NightRecording]:
    """Generate ``n_subjects * nights_per_subject`` recordings, subject-major.

    Per-subject randomness comes from spawned seed sequences, so the output
    is a pure function of ``(spec, seed)`` regardless of how callers might
    later parallelise per-night work.
    """
    mat = transition_matrix(spec.self_transition)
    n_samples = int(round(EPOCH_SEC * spec.sample_rate))
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / spec.sample_rate)
    width = max(2, len(str(spec.n_subjects)))

    recordings = []
    root = np.random.SeedSequence(seed)
    for s, subject_seq in enumerate(root.spawn(spec.n_subjects)):
        subject_rng = np.random.default_rng(subject_seq)
        if spec.shift_range is not None:
            subject_shift = subject_rng.uniform(*spec.shift_range)
        else:
            subject_shift = subject_rng.normal(0.0, spec.shift_std)
        subject_gain = float(np.exp(subject_rng.normal(0.0, spec.gain_log_std)))
        subject_id = f"{spec.subject_prefix}{s + 1:0{width}d}"
        for night, night_seq in enumerate(subject_seq.spawn(spec.nights_per_subject)):
            recordings.append(
                _generate_night(
                    np.random.default_rng(night_seq),
                    spec,
                    subject_id,
                    night + 1,
                    subject_shift,
                    subject_gain,
                    mat,
                    freqs,
                    n_samples,
                )
            )
    return recordings
