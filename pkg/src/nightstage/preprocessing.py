"""Turn trimmed night recordings into normalized time-frequency sequences.

The pipeline per night: cut the signal into labeled 30 s epochs (splicing
out excluded ones), transform each epoch into a log-amplitude spectral
image, standardize the night's images by the night's own statistics, and
assemble overlapping length-L sequences for training and scoring.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .records import EPOCH_SEC, NightRecording, RecordingError, stages_per_epoch

EPS_SPEC = 1e-6
CACHE_MAGIC = b"NSCACHE1"


class PreprocessingError(ValueError):
    pass


@dataclass(frozen=True)
class StftParams:
    """Short-time transform settings; defaults give 129×29 images at 100 Hz."""

    frame_sec: float = 2.0
    hop_sec: float = 1.0
    fft_size: int = 256
    eps: float = EPS_SPEC

    def frame_len(self, sample_rate: float) -> int:
        return int(round(self.frame_sec * sample_rate))

    def hop_len(self, sample_rate: float) -> int:
        return int(round(self.hop_sec * sample_rate))

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    def time_cols(self, sample_rate: float) -> int:
        epoch_len = int(round(EPOCH_SEC * sample_rate))
        return (epoch_len - self.frame_len(sample_rate)) // self.hop_len(sample_rate) + 1


def segment_epochs(rec: NightRecording):
    """Cut the in-bed signal into labeled 30 s windows.

    Epochs whose annotation maps to "excluded" (movement/unknown) or that
    carry no annotation are removed and the remainder spliced together, so
    neighbors in the output may not have been neighbors in the night.
    Returns (windows, labels): windows is (n, 30·fs), labels int array.
    """
    labels = stages_per_epoch(rec)
    epoch_len = int(round(EPOCH_SEC * rec.sample_rate))
    usable = rec.n_epochs * epoch_len
    if usable == 0:
        raise RecordingError("recording holds no complete epoch")
    windows = rec.signal[:usable].reshape(rec.n_epochs, epoch_len)
    keep = [k for k, s in enumerate(labels) if s is not None]
    kept_labels = np.array([int(labels[k]) for k in keep], dtype=np.int64)
    return windows[keep].copy(), kept_labels


def stft_epoch(window: np.ndarray, sample_rate: float = 100.0, params: StftParams = StftParams()):
    """One epoch → F×T image of log amplitude spectra.

    Frames of `frame_sec` seconds are taken every `hop_sec` seconds,
    tapered with a symmetric Hamming window, zero-padded to `fft_size`, and
    reduced to the one-sided amplitude spectrum.  Entries are
    ``log(amplitude + eps)``.
    """
    window = np.asarray(window, dtype=np.float64)
    frame = params.frame_len(sample_rate)
    hop = params.hop_len(sample_rate)
    expected = int(round(EPOCH_SEC * sample_rate))
    if window.ndim != 1 or window.size != expected:
        raise PreprocessingError(
            f"epoch window must be {expected} samples at {sample_rate} Hz, got {window.shape}"
        )
    frames = np.lib.stride_tricks.sliding_window_view(window, frame)[::hop]
    spectra = np.abs(np.fft.rfft(frames * np.hamming(frame), n=params.fft_size, axis=1))
    return np.log(spectra + params.eps).T


def night_images(
    rec: NightRecording, params: StftParams = StftParams()
) -> tuple[np.ndarray, np.ndarray]:
    """All labeled epochs of a night as a (n, F, T) image stack + labels."""
    windows, labels = segment_epochs(rec)
    if windows.shape[0] == 0:
        raise PreprocessingError(f"night {rec.subject_id}/{rec.night_index}: no labeled epochs")
    images = np.stack([stft_epoch(w, rec.sample_rate, params) for w in windows])
    return images, labels


@dataclass
class NormalizationRecord:
    """Statistics removed from a night's images; kept for reporting."""

    mode: str  # "per_bin" or "global"
    mean: np.ndarray
    std: np.ndarray


def per_night_normalize(images: np.ndarray, mode: str = "per_bin"):
    """Standardize a night's image stack by its own statistics.

    With mode "per_bin" (default) each frequency bin is standardized by the
    mean/std over every spectral column of every epoch of the night; with
    "global" one scalar pair is used for the whole stack.  Population std.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise PreprocessingError(f"expected (n_epochs, F, T) stack, got shape {images.shape}")
    if images.shape[0] < 2:
        raise PreprocessingError("per-night statistics need at least 2 epochs")
    if mode == "per_bin":
        mean = images.mean(axis=(0, 2))
        std = images.std(axis=(0, 2))
        bad = np.flatnonzero(std < 1e-12)
        if bad.size:
            raise PreprocessingError(
                f"zero standard deviation in frequency bin {int(bad[0])} (degenerate signal)"
            )
        normalized = (images - mean[None, :, None]) / std[None, :, None]
    elif mode == "global":
        mean = images.mean()
        std = images.std()
        if std < 1e-12:
            raise PreprocessingError("zero standard deviation across the night (degenerate signal)")
        normalized = (images - mean) / std
        mean, std = np.float64(mean), np.float64(std)
    else:
        raise PreprocessingError(f"unknown normalization mode {mode!r}")
    return normalized, NormalizationRecord(mode=mode, mean=np.asarray(mean), std=np.asarray(std))


@dataclass
class PreprocessedNight:
    """Cached, model-ready form of one night."""

    subject_id: str
    night_index: int
    images: np.ndarray  # (n_epochs, F, T) normalized
    labels: np.ndarray  # (n_epochs,) ints in 0..4
    norm: NormalizationRecord
    stft: StftParams = field(default_factory=StftParams)
    excluded_epochs: int = 0

    @property
    def n_epochs(self) -> int:
        return int(self.images.shape[0])


def preprocess_night(
    rec: NightRecording, params: StftParams = StftParams(), norm_mode: str = "per_bin"
) -> PreprocessedNight:
    images, labels = night_images(rec, params)
    normalized, norm = per_night_normalize(images, mode=norm_mode)
    return PreprocessedNight(
        subject_id=rec.subject_id,
        night_index=rec.night_index,
        images=normalized,
        labels=labels,
        norm=norm,
        stft=params,
        excluded_epochs=rec.n_epochs - images.shape[0],
    )


def sequence_starts(n_epochs: int, length: int, stride: int = 1) -> np.ndarray:
    """Start indices of length-`length` windows: 0, stride, … while they fit."""
    if length < 1 or stride < 1:
        raise PreprocessingError(f"length and stride must be ≥1, got {length}, {stride}")
    if n_epochs < length:
        raise PreprocessingError(f"night has {n_epochs} epochs, need at least {length}")
    return np.arange(0, n_epochs - length + 1, stride)


@dataclass
class SequenceSample:
    """L consecutive epoch images with their one-hot labels and origin."""

    images: np.ndarray  # (L, F, T)
    labels: np.ndarray  # (L, 5) one-hot
    origin: tuple  # (subject_id, night_index, start_epoch)


def assemble_sequences(night: PreprocessedNight, length: int, stride: int = 1):
    starts = sequence_starts(night.n_epochs, length, stride)
    eye = np.eye(5)
    return [
        SequenceSample(
            images=night.images[s : s + length],
            labels=eye[night.labels[s : s + length]],
            origin=(night.subject_id, night.night_index, int(s)),
        )
        for s in starts
    ]


# -- night cache -------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian u32 header length, JSON header (shapes,
# identity, transform settings, normalization record), then the image stack
# as little-endian float32, then one label byte per epoch.


def save_cache(path, night: PreprocessedNight) -> None:
    header = {
        "format": "night-cache",
        "version": 1,
        "subject_id": night.subject_id,
        "night_index": night.night_index,
        "n_epochs": night.n_epochs,
        "freq_bins": int(night.images.shape[1]),
        "time_cols": int(night.images.shape[2]),
        "excluded_epochs": night.excluded_epochs,
        "stft": {
            "frame_sec": night.stft.frame_sec,
            "hop_sec": night.stft.hop_sec,
            "fft_size": night.stft.fft_size,
            "eps": night.stft.eps,
        },
        "norm": {
            "mode": night.norm.mode,
            "mean": np.asarray(night.norm.mean).ravel().tolist(),
            "std": np.asarray(night.norm.std).ravel().tolist(),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(night.images.astype("<f4").tobytes())
        fh.write(night.labels.astype(np.uint8).tobytes())


def load_cache(path) -> PreprocessedNight:
    data = Path(path).read_bytes()
    if data[:8] != CACHE_MAGIC:
        raise PreprocessingError(f"{path}: not a night cache (bad magic {data[:8]!r})")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if header.get("format") != "night-cache" or header.get("version") != 1:
        raise PreprocessingError(f"{path}: unsupported cache version {header.get('version')!r}")
    n, f, t = header["n_epochs"], header["freq_bins"], header["time_cols"]
    off = 12 + hlen
    img_bytes = n * f * t * 4
    if len(data) < off + img_bytes + n:
        raise PreprocessingError(f"{path}: cache truncated")
    images = np.frombuffer(data, dtype="<f4", count=n * f * t, offset=off).reshape(n, f, t)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + img_bytes)
    stats = header["norm"]
    mean, std = np.array(stats["mean"]), np.array(stats["std"])
    if stats["mode"] == "global":
        mean, std = mean[0], std[0]
    s = header["stft"]
    return PreprocessedNight(
        subject_id=header["subject_id"],
        night_index=header["night_index"],
        images=images.astype(np.float64),
        labels=labels.astype(np.int64),
        norm=NormalizationRecord(mode=stats["mode"], mean=mean, std=std),
        stft=StftParams(
            frame_sec=s["frame_sec"], hop_sec=s["hop_sec"], fft_size=s["fft_size"], eps=s["eps"]
        ),
        excluded_epochs=header.get("excluded_epochs", 0),
    )
