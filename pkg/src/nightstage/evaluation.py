"""Scoring: posterior fusion across overlapping sequences, confusion-matrix
metrics, study tabulation, and the personalize-or-not accuracy gate.

Averaging conventions are pinned here once: multiclass sensitivity and
specificity are macro one-vs-rest means, classes absent from both truth and
prediction contribute zero to every macro mean (and are counted), and all
reported standard deviations are population standard deviations (divide by
n).  Per-class values ride along so alternative conventions can be
recomputed from the same report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, forward
from .preprocessing import PreprocessedNight, assemble_sequences
from .records import NUM_STAGES

EPS_FUSION = 1e-300  # guards log of an underflowed posterior entry
BETA_DEFAULT = 0.77
FUSION_MODES = ("geometric", "last")
REPORT_COLUMNS = (
    "subject",
    "night",
    "alpha",
    "strategy",
    "snapshot_epoch",
    "acc",
    "kappa",
    "mf1",
    "sens",
    "spec",
    "n_epochs",
)


class EvaluationError(ValueError):
    """Raised for unscorable inputs or inconsistent study layouts."""


# -- posterior fusion ---------------------------------------------------------


def aggregate_epoch_posteriors(sequence_posteriors, n_epochs: int, fusion: str = "geometric"):
    """Fuse overlapping per-sequence posteriors into one posterior per epoch.

    ``sequence_posteriors`` is an iterable of ``(start_epoch, (L, C) rows)``.
    Geometric fusion averages log-probabilities over every sequence covering
    an epoch and renormalizes, so duplicated identical evidence does not
    sharpen the result; ``fusion="last"`` keeps the posterior from the last
    sequence in input order instead.  Returns ``(fused (n, C), predicted
    stage indices (n,))``; argmax ties resolve to the lowest stage index.
    """
    if fusion not in FUSION_MODES:
        raise EvaluationError(f"unknown fusion mode {fusion!r}; valid: {list(FUSION_MODES)}")
    pairs = list(sequence_posteriors)
    if not pairs:
        raise EvaluationError("no sequence posteriors supplied")
    classes = np.asarray(pairs[0][1]).shape[1]
    log_sum = np.zeros((n_epochs, classes))
    cover = np.zeros(n_epochs, dtype=np.int64)
    last = np.zeros((n_epochs, classes))
    for start, rows in pairs:
        rows = np.asarray(rows, dtype=np.float64)
        stop = start + rows.shape[0]
        if start < 0 or stop > n_epochs:
            raise EvaluationError(
                f"sequence [{start}, {stop}) falls outside the night's {n_epochs} epochs"
            )
        log_sum[start:stop] += np.log(rows + EPS_FUSION)
        last[start:stop] = rows
        cover[start:stop] += 1
    if np.any(cover == 0):
        missing = int(np.argwhere(cover == 0)[0, 0])
        raise EvaluationError(f"epoch {missing} is not covered by any sequence")
    if fusion == "last":
        fused = last / last.sum(axis=1, keepdims=True)
    else:
        mean_log = log_sum / cover[:, None]
        mean_log -= mean_log.max(axis=1, keepdims=True)
        fused = np.exp(mean_log)
        fused /= fused.sum(axis=1, keepdims=True)
    return fused, fused.argmax(axis=1)


def night_posterior_sequences(params: ModelParams, night: PreprocessedNight, batch_size: int = 8):
    """All stride-1 sequence posteriors of a night as (start, (L, C)) pairs."""
    sequences = assemble_sequences(night, params.config.sequence_length, stride=1)
    pairs = []
    for i in range(0, len(sequences), batch_size):
        batch = sequences[i : i + batch_size]
        probs = forward(params, np.stack([s.images for s in batch]))
        pairs.extend((s.origin[2], p) for s, p in zip(batch, probs))
    return pairs


# -- confusion-matrix metrics -------------------------------------------------


def confusion_matrix(truth, prediction, classes: int = NUM_STAGES) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    truth = np.asarray(truth, dtype=np.int64)
    prediction = np.asarray(prediction, dtype=np.int64)
    if truth.shape != prediction.shape:
        raise EvaluationError(f"length mismatch: {truth.shape} truth vs {prediction.shape} predicted")
    if truth.size == 0:
        raise EvaluationError("nothing to score: empty label arrays")
    for name, arr in (("truth", truth), ("prediction", prediction)):
        if arr.min() < 0 or arr.max() >= classes:
            raise EvaluationError(f"{name} labels outside 0..{classes - 1}")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (truth, prediction), 1)
    return cm


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    kappa: float
    macro_f1: float
    sensitivity: float  # macro one-vs-rest recall
    specificity: float  # macro one-vs-rest true-negative rate
    per_class_precision: tuple
    per_class_recall: tuple
    per_class_f1: tuple
    per_class_specificity: tuple
    n_epochs: int


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(cm) -> MetricsReport:
    """Five headline metrics from a confusion matrix.

    Kappa uses chance agreement from the marginal products; if chance
    agreement saturates at 1 (a single cell holds everything) kappa is
    defined as 0.  Classes with empty denominators score 0 in the per-class
    values and still enter every macro mean.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise EvaluationError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise EvaluationError("confusion matrix has negative counts")
    total = int(cm.sum())
    if total == 0:
        raise EvaluationError("confusion matrix is empty")
    cm = cm.astype(np.float64)
    tp = np.diag(cm)
    truth_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)

    accuracy = float(tp.sum() / total)
    chance = float((truth_count * pred_count).sum() / total**2)
    kappa = 0.0 if chance >= 1.0 else float((accuracy - chance) / (1.0 - chance))

    precision = _safe_div(tp, pred_count)
    recall = _safe_div(tp, truth_count)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    tn = total - truth_count - pred_count + tp
    specificity = _safe_div(tn, total - truth_count)

    return MetricsReport(
        accuracy=accuracy,
        kappa=kappa,
        macro_f1=float(f1.mean()),
        sensitivity=float(recall.mean()),
        specificity=float(specificity.mean()),
        per_class_precision=tuple(precision),
        per_class_recall=tuple(recall),
        per_class_f1=tuple(f1),
        per_class_specificity=tuple(specificity),
        n_epochs=total,
    )


@dataclass
class NightScore:
    posteriors: np.ndarray  # (n_epochs, C) fused
    predictions: np.ndarray  # (n_epochs,) stage indices
    confusion: np.ndarray
    metrics: MetricsReport


def score_night(
    params: ModelParams, night: PreprocessedNight, batch_size: int = 8, fusion: str = "geometric"
) -> NightScore:
    """Fused per-epoch scoring of one night against its labels."""
    fused, pred = aggregate_epoch_posteriors(
        night_posterior_sequences(params, night, batch_size), night.n_epochs, fusion
    )
    cm = confusion_matrix(night.labels, pred)
    return NightScore(posteriors=fused, predictions=pred, confusion=cm, metrics=compute_metrics(cm))


# -- personalize-or-not gate --------------------------------------------------


def personalization_gate(accuracy_before: float, beta: float = BETA_DEFAULT) -> str:
    """"GroupA" (personalize) iff the starting accuracy is below beta;
    equal-or-above lands in "GroupB"."""
    if not 0.0 <= accuracy_before <= 1.0:
        raise EvaluationError(f"accuracy must be in [0, 1], got {accuracy_before}")
    if not 0.0 <= beta <= 1.0:
        raise EvaluationError(f"beta must be in [0, 1], got {beta}")
    return "GroupA" if accuracy_before < beta else "GroupB"


# -- study tabulation ----------------------------------------------------------


@dataclass(frozen=True)
class SnapshotScore:
    """Metrics of one personalization snapshot evaluated on a held-out night."""

    subject: str
    night: int
    alpha: float
    strategy: str
    snapshot_epoch: int
    metrics: MetricsReport


@dataclass
class ExperimentReport:
    grid: list  # snapshot epochs shared by every run
    table: list = field(default_factory=list)  # before/after mean±std per (alpha, strategy, metric)
    curves: dict = field(default_factory=dict)  # "alpha=..|strategy=.." → [(epoch, mean, std)]
    scatter: list = field(default_factory=list)  # per-subject before/after accuracy
    groups: list = field(default_factory=list)  # β-gate group means
    beta: float = BETA_DEFAULT


def _population_std(values) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64)))


_METRIC_FIELDS = (
    ("acc", "accuracy"),
    ("kappa", "kappa"),
    ("mf1", "macro_f1"),
    ("sens", "sensitivity"),
    ("spec", "specificity"),
)


def experiment_report(scores, beta: float = BETA_DEFAULT) -> ExperimentReport:
    """Tabulate snapshot scores into study outputs.

    Produces, per (alpha, strategy): before/after mean ± std for the five
    metrics (before = earliest snapshot, after = latest), the accuracy-vs-
    finetune-epoch curve, per-subject improvement scatter rows, and mean
    improvements within the two β-gate groups.  Every run must share one
    snapshot grid; a deviating run is an error.
    """
    scores = list(scores)
    if not scores:
        raise EvaluationError("no snapshot scores supplied")

    runs: dict = {}
    for s in scores:
        runs.setdefault((s.alpha, s.strategy, s.subject, s.night), {})[s.snapshot_epoch] = s
    grid = sorted({e for (_, _, _, _), snaps in runs.items() for e in snaps} )
    for key, snaps in runs.items():
        have = sorted(snaps)
        if have != grid:
            alpha, strategy, subject, night = key
            raise EvaluationError(
                f"inconsistent snapshot grid for subject {subject!r} night {night} "
                f"(alpha={alpha}, strategy={strategy}): {have} vs {grid}"
            )
    first, last = grid[0], grid[-1]

    report = ExperimentReport(grid=list(grid), beta=beta)
    combos = sorted({(a, st) for (a, st, _, _) in runs}, key=lambda c: (c[0], c[1]))
    for alpha, strategy in combos:
        combo_runs = {k: v for k, v in runs.items() if k[0] == alpha and k[1] == strategy}
        ordered = [combo_runs[k] for k in sorted(combo_runs)]
        for column, attr in _METRIC_FIELDS:
            before = [getattr(r[first].metrics, attr) for r in ordered]
            after = [getattr(r[last].metrics, attr) for r in ordered]
            report.table.append(
                {
                    "alpha": alpha,
                    "strategy": strategy,
                    "metric": column,
                    "n_subjects": len(ordered),
                    "before_mean": float(np.mean(before)),
                    "before_std": _population_std(before),
                    "after_mean": float(np.mean(after)),
                    "after_std": _population_std(after),
                }
            )
        curve = []
        for epoch in grid:
            accs = [r[epoch].metrics.accuracy for r in ordered]
            curve.append((epoch, float(np.mean(accs)), _population_std(accs)))
        report.curves[f"alpha={alpha:g}|strategy={strategy}"] = curve

        grouped: dict = {"GroupA": [], "GroupB": []}
        for key in sorted(combo_runs):
            run = combo_runs[key]
            acc_before = run[first].metrics.accuracy
            acc_after = run[last].metrics.accuracy
            report.scatter.append(
                {
                    "subject": key[2],
                    "night": key[3],
                    "alpha": alpha,
                    "strategy": strategy,
                    "acc_before": acc_before,
                    "acc_after": acc_after,
                    "improvement": acc_after - acc_before,
                }
            )
            grouped[personalization_gate(acc_before, beta)].append(acc_after - acc_before)
        for group in ("GroupA", "GroupB"):
            values = grouped[group]
            report.groups.append(
                {
                    "alpha": alpha,
                    "strategy": strategy,
                    "group": group,
                    "n_subjects": len(values),
                    "mean_improvement": float(np.mean(values)) if values else 0.0,
                }
            )
    return report


# -- report files --------------------------------------------------------------


def write_report_csv(path, scores) -> Path:
    """One row per scored snapshot; floats keep full repr precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for s in scores:
            writer.writerow(
                [
                    s.subject,
                    s.night,
                    repr(float(s.alpha)),
                    s.strategy,
                    s.snapshot_epoch,
                    repr(s.metrics.accuracy),
                    repr(s.metrics.kappa),
                    repr(s.metrics.macro_f1),
                    repr(s.metrics.sensitivity),
                    repr(s.metrics.specificity),
                    s.metrics.n_epochs,
                ]
            )
    return path


def write_curves_json(path, report: ExperimentReport) -> Path:
    path = Path(path)
    payload = {
        "snapshot_grid": report.grid,
        "beta": report.beta,
        "curves": {
            key: [
                {"snapshot_epoch": e, "mean_acc": m, "std_acc": s} for e, m, s in curve
            ]
            for key, curve in report.curves.items()
        },
        "table": report.table,
        "scatter": report.scatter,
        "groups": report.groups,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
