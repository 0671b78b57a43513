"""Estimator-style wrappers over the functional core.

Thin adapters following the scikit-learn conventions (constructor params
stored verbatim, ``fit`` returning self, fitted state in trailing-underscore
attributes, ``get_params``/``clone`` compatibility) so the pipeline can sit
next to ordinary sklearn tooling.  X is a list of per-night spectrogram
stacks ``(n_epochs, F, T)`` — nights have different lengths, so lists rather
than one rectangular array — and y is the matching list of per-epoch stage
arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .evaluation import score_night
from .model import ModelConfig, ModelParams
from .preprocessing import (
    NormalizationRecord,
    PreprocessedNight,
    StftParams,
    night_images,
    per_night_normalize,
)
from .records import NUM_STAGES, NightRecording
from .training import FinetuneConfig, PretrainConfig, personalize, pretrain


def _as_night_list(X):
    if isinstance(X, (NightRecording, np.ndarray)):
        return [X]
    return list(X)


def _check_images(images, name="X"):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"{name} must be a (n_epochs, F, T) stack, got shape {images.shape}")
    if not np.all(np.isfinite(images)):
        raise ValueError(f"{name} contains non-finite values")
    return images


def _check_labels(labels, n_epochs, name="y"):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_epochs,):
        raise ValueError(f"{name} must have shape ({n_epochs},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_STAGES):
        raise ValueError(f"{name} has labels outside 0..{NUM_STAGES - 1}")
    return labels


def _wrap_night(images, labels, index):
    images = _check_images(images)
    labels = _check_labels(labels, images.shape[0])
    bins = images.shape[1]
    return PreprocessedNight(
        subject_id=f"night{index}",
        night_index=1,
        images=images,
        labels=labels,
        norm=NormalizationRecord("per_bin", np.zeros(bins), np.ones(bins)),
    )


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Raw night recordings → per-epoch log-magnitude spectrogram stacks.

    Stateless; ``fit`` only validates the window settings.  ``transform``
    accepts a NightRecording or a list of them and returns the matching list
    of (n_epochs, F, T) arrays.  Per-epoch labels are available from
    :meth:`transform_labeled` since transformers carry no y.
    """

    def __init__(self, frame_sec=2.0, hop_sec=1.0, fft_size=256, eps=1e-6):
        self.frame_sec = frame_sec
        self.hop_sec = hop_sec
        self.fft_size = fft_size
        self.eps = eps

    def _params(self):
        return StftParams(
            frame_sec=self.frame_sec, hop_sec=self.hop_sec, fft_size=self.fft_size, eps=self.eps
        )

    def fit(self, X, y=None):
        self._params()
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        params = self._params()
        return [night_images(rec, params)[0] for rec in _as_night_list(X)]

    def transform_labeled(self, X):
        """Like transform, but returns (images, labels) pairs."""
        params = self._params()
        return [night_images(rec, params) for rec in _as_night_list(X)]


class PerNightScaler(TransformerMixin, BaseEstimator):
    """Normalize each night's spectrogram stack with its own statistics.

    Stateless across nights by design — every night is scored against its
    own distribution, which is what makes a model transferable to an unseen
    subject without access to their training-time statistics.
    """

    def __init__(self, mode="per_bin"):
        self.mode = mode

    def fit(self, X, y=None):
        if self.mode not in ("per_bin", "global"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        single = isinstance(X, np.ndarray)
        stacks = [X] if single else list(X)
        out = [per_night_normalize(_check_images(s), mode=self.mode)[0] for s in stacks]
        return out[0] if single else out


class SleepSequenceClassifier(ClassifierMixin, BaseEstimator):
    """Sequence-to-sequence stager trained from scratch on labeled nights.

    ``fit(X, y)`` takes lists of normalized night stacks and label arrays;
    the last ``validation_nights`` nights are held out to pick the retained
    checkpoint.  ``predict`` fuses overlapping sequence posteriors into one
    stage per epoch.
    """

    def __init__(
        self,
        filters=32,
        epb_hidden=64,
        spb_hidden=64,
        attention_size=64,
        sequence_length=20,
        recurrent_norm=False,
        learning_rate=1e-4,
        epochs=20,
        batch_size=8,
        lam=1e-4,
        validation_nights=1,
        seed=0,
    ):
        self.filters = filters
        self.epb_hidden = epb_hidden
        self.spb_hidden = spb_hidden
        self.attention_size = attention_size
        self.sequence_length = sequence_length
        self.recurrent_norm = recurrent_norm
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lam = lam
        self.validation_nights = validation_nights
        self.seed = seed

    def _model_config(self, freq_bins):
        return ModelConfig(
            freq_bins=freq_bins,
            filters=self.filters,
            epb_hidden=self.epb_hidden,
            spb_hidden=self.spb_hidden,
            attention_size=self.attention_size,
            sequence_length=self.sequence_length,
            recurrent_norm=self.recurrent_norm,
        )

    def fit(self, X, y):
        stacks = _as_night_list(X)
        labels = list(y)
        if len(stacks) != len(labels):
            raise ValueError(f"{len(stacks)} nights but {len(labels)} label arrays")
        if len(stacks) < self.validation_nights + 1:
            raise ValueError(
                f"need at least {self.validation_nights + 1} nights "
                f"({self.validation_nights} reserved for validation)"
            )
        nights = [_wrap_night(s, l, i) for i, (s, l) in enumerate(zip(stacks, labels))]
        split = len(nights) - self.validation_nights
        result = pretrain(
            nights[:split],
            nights[split:],
            PretrainConfig(
                learning_rate=self.learning_rate,
                epochs=self.epochs,
                batch_size=self.batch_size,
                lam=self.lam,
            ),
            seed=self.seed,
            model=self._model_config(nights[0].images.shape[1]),
        )
        self.params_ = result.params
        self.result_ = result
        self.classes_ = np.arange(NUM_STAGES)
        self.n_features_in_ = nights[0].images.shape[1]
        return self

    def _fitted_params(self) -> ModelParams:
        if not hasattr(self, "params_"):
            raise NotFittedError(
                f"This {type(self).__name__} instance is not fitted yet; call fit first"
            )
        return self.params_

    def predict_proba(self, X):
        params = self._fitted_params()
        out = []
        for i, stack in enumerate(_as_night_list(X)):
            night = _wrap_night(stack, np.zeros(np.asarray(stack).shape[0], dtype=np.int64), i)
            out.append(score_night(params, night, batch_size=self.batch_size).posteriors)
        return out

    def predict(self, X):
        return [p.argmax(axis=1) for p in self.predict_proba(X)]

    def score(self, X, y):
        predictions = self.predict(X)
        hits = sum(int((p == np.asarray(t)).sum()) for p, t in zip(predictions, y))
        total = sum(len(p) for p in predictions)
        return hits / total


class KLPersonalizer(ClassifierMixin, BaseEstimator):
    """Single-night finetuning of a fitted stager, pulled toward its start.

    ``base`` is a fitted SleepSequenceClassifier (or a ModelParams
    checkpoint).  ``fit(X, y)`` takes that one night; the alpha-weighted
    soft-target term keeps the personalized model near the starting model
    while the labeled term adapts it.
    """

    def __init__(
        self,
        base=None,
        alpha=0.4,
        strategy="All",
        learning_rate=1e-4,
        finetune_epochs=50,
        snapshot_every=5,
        batch_size=8,
        lam=1e-4,
        seed=0,
    ):
        self.base = base
        self.alpha = alpha
        self.strategy = strategy
        self.learning_rate = learning_rate
        self.finetune_epochs = finetune_epochs
        self.snapshot_every = snapshot_every
        self.batch_size = batch_size
        self.lam = lam
        self.seed = seed

    def _start_params(self) -> ModelParams:
        if isinstance(self.base, ModelParams):
            return self.base
        if isinstance(self.base, SleepSequenceClassifier):
            return self.base._fitted_params()
        raise ValueError(
            "base must be a fitted SleepSequenceClassifier or a ModelParams checkpoint"
        )

    def fit(self, X, y):
        images = _check_images(np.asarray(X, dtype=np.float64))
        labels = _check_labels(y, images.shape[0])
        night = _wrap_night(images, labels, 0)
        result = personalize(
            self._start_params(),
            night,
            FinetuneConfig(
                strategy=self.strategy,
                alpha=self.alpha,
                learning_rate=self.learning_rate,
                finetune_epochs=self.finetune_epochs,
                snapshot_every=self.snapshot_every,
                batch_size=self.batch_size,
                lam=self.lam,
                seed=self.seed,
            ),
        )
        self.result_ = result
        self.snapshots_ = result.snapshots
        self.params_ = result.snapshots[-1][1]
        self.classes_ = np.arange(NUM_STAGES)
        self.n_features_in_ = images.shape[1]
        return self

    def _fitted_params(self) -> ModelParams:
        if not hasattr(self, "params_"):
            raise NotFittedError(
                f"This {type(self).__name__} instance is not fitted yet; call fit first"
            )
        return self.params_

    def predict_proba(self, X):
        images = _check_images(np.asarray(X, dtype=np.float64))
        night = _wrap_night(images, np.zeros(images.shape[0], dtype=np.int64), 0)
        return score_night(self._fitted_params(), night, batch_size=self.batch_size).posteriors

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        prediction = self.predict(X)
        return float(np.mean(prediction == np.asarray(y)))
