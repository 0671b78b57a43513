"""Subject-independent pretraining and single-night finetuning loops.

Both loops share the same mechanics: stride-1 sequences, per-epoch shuffles
derived from ``(seed, epoch)``, Adam updates, and abort-on-divergence.
Pretraining retains the checkpoint with the best validation accuracy;
personalization deliberately has no validation-based stopping (there is no
second night to validate on) and instead emits periodic snapshots so the
caller can trace accuracy against finetuning time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, no_grad
from .losses import LossConfig, personalization_loss, sequence_ce_loss
from .model import (
    ModelConfig,
    ModelParams,
    build_posteriors,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    strategy_groups,
)
from .optim import Adam
from .preprocessing import PreprocessedNight, assemble_sequences

MANIFEST_SCHEMA_VERSION = 1


class TrainingError(ValueError):
    """Raised for unusable training inputs or corrupt run directories."""


@dataclass
class PretrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    lam: float = 1e-4

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be at least 1")
        if self.lam < 0:
            raise TrainingError("lam must be non-negative")


@dataclass
class FinetuneConfig:
    strategy: str = "All"
    alpha: float = 0.0
    learning_rate: float = 1e-4
    finetune_epochs: int = 50
    snapshot_every: int = 5
    batch_size: int = 8
    lam: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        strategy_groups(self.strategy)  # raises on unknown names
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.finetune_epochs < 1 or self.snapshot_every < 1 or self.batch_size < 1:
            raise TrainingError("finetune_epochs, snapshot_every and batch_size must be ≥1")
        if self.lam < 0:
            raise TrainingError("lam must be non-negative")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one pass: a fresh generator keyed by (seed, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Sequence samples → ((B, L, F, T) images, (L·B, C) one-hot rows)."""
    images = np.stack([s.images for s in batch])
    one_hot = np.stack([s.labels for s in batch]).transpose(1, 0, 2)
    return images, one_hot.reshape(-1, one_hot.shape[-1])


def _dataset_accuracy(params: ModelParams, sequences, batch_size: int) -> float:
    hits = 0
    total = 0
    for i in range(0, len(sequences), batch_size):
        batch = sequences[i : i + batch_size]
        probs = forward(params, np.stack([s.images for s in batch]))
        pred = probs.argmax(axis=2)
        truth = np.stack([s.labels.argmax(axis=1) for s in batch])
        hits += int((pred == truth).sum())
        total += pred.size
    return hits / total


@dataclass
class PretrainResult:
    params: ModelParams  # checkpoint retained by validation accuracy
    best_epoch: int  # 1-based; 0 when no epoch finished
    valid_accuracy: list[float] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    diverged: bool = False
    completed_epochs: int = 0


def pretrain(
    train_nights,
    valid_nights,
    config: PretrainConfig | None = None,
    seed: int = 0,
    model: ModelConfig | None = None,
) -> PretrainResult:
    """Train a subject-independent model from scratch.

    Stride-1 sequences from all training nights, shuffled each epoch; the
    snapshot with the best validation accuracy is retained.  A non-finite
    loss aborts the run and rolls back to the last finished epoch.
    """
    if not train_nights:
        raise TrainingError("training set is empty")
    if not valid_nights:
        raise TrainingError("validation set is empty; checkpoint retention needs one")
    config = config or PretrainConfig()
    model = model or ModelConfig()
    length = model.sequence_length
    train_seqs = [s for n in train_nights for s in assemble_sequences(n, length, stride=1)]
    valid_seqs = [s for n in valid_nights for s in assemble_sequences(n, length, stride=length)]

    params = init_params(model, seed)
    params.set_trainable("All")
    opt = Adam(params.trainable_tensors(), lr=config.learning_rate)

    best = params.copy()
    best_epoch = 0
    best_acc = -1.0
    last_good = params.copy()
    result = PretrainResult(params=best, best_epoch=0)

    for epoch in range(1, config.epochs + 1):
        order = epoch_order(seed, epoch, len(train_seqs))
        batch_losses = []
        finite = True
        for i in range(0, len(order), config.batch_size):
            batch = [train_seqs[j] for j in order[i : i + config.batch_size]]
            images, one_hot = stack_batch(batch)
            params.zero_grads()
            try:
                post = build_posteriors(params, images, train=True)
                loss = sequence_ce_loss(post, one_hot, params, config.lam, length)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteError("training loss is non-finite")
                loss.backward()
                opt.step()
            except NonFiniteError:
                finite = False
                break
            batch_losses.append(value)
        if not finite:
            result.diverged = True
            break
        result.completed_epochs = epoch
        result.loss_curve.append(float(np.mean(batch_losses)))
        acc = _dataset_accuracy(params, valid_seqs, config.batch_size)
        result.valid_accuracy.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best = params.copy()
        last_good = params.copy()

    # `best` is the initial model if no epoch finished, i.e. the last state
    # that was ever known to be finite.
    del last_good
    result.params = best
    result.best_epoch = best_epoch
    return result


@dataclass
class PersonalizeResult:
    snapshots: list  # [(finetune epoch, ModelParams)]; epoch 0 is the start
    loss_curve: list[float] = field(default_factory=list)
    trainable: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    diverged: bool = False
    completed_epochs: int = 0


def personalize(
    si: ModelParams, night: PreprocessedNight, config: FinetuneConfig | None = None
) -> PersonalizeResult:
    """Finetune a copy of the subject-independent model on one night.

    Per batch, the frozen starting model's posteriors on the same inputs
    are computed first and enter the objective as soft targets weighted by
    ``alpha``; the strategy decides which blocks receive updates.  There is
    no early stopping — snapshots every ``snapshot_every`` epochs (plus the
    start and the final epoch) let the caller inspect the whole trajectory.
    The ``si`` model itself is never modified.
    """
    config = config or FinetuneConfig()
    length = si.config.sequence_length
    if night.n_epochs < length:
        raise TrainingError(
            f"night has {night.n_epochs} epochs; need at least {length} for one sequence"
        )
    if night.images.shape[1] != si.config.freq_bins:
        raise TrainingError(
            f"night images have {night.images.shape[1]} frequency bins, "
            f"checkpoint expects {si.config.freq_bins}"
        )

    params = si.copy()
    trainable, frozen = params.set_trainable(config.strategy)
    loss_cfg = LossConfig(lam=config.lam, alpha=config.alpha)
    opt = Adam(params.trainable_tensors(), lr=config.learning_rate)
    sequences = assemble_sequences(night, length, stride=1)

    result = PersonalizeResult(
        snapshots=[(0, params.copy())], trainable=trainable, frozen=frozen
    )
    for epoch in range(1, config.finetune_epochs + 1):
        order = epoch_order(config.seed, epoch, len(sequences))
        batch_losses = []
        finite = True
        for i in range(0, len(order), config.batch_size):
            batch = [sequences[j] for j in order[i : i + config.batch_size]]
            images, one_hot = stack_batch(batch)
            si_probs = None
            if config.alpha > 0.0:
                with no_grad():
                    si_probs = build_posteriors(si, images, train=False).data
            params.zero_grads()
            try:
                post = build_posteriors(params, images, train=True)
                loss = personalization_loss(si_probs, post, one_hot, params, loss_cfg, length)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteError("finetuning loss is non-finite")
                loss.backward()
                opt.step()
            except NonFiniteError:
                finite = False
                break
            batch_losses.append(value)
        if not finite:
            result.diverged = True
            break
        result.completed_epochs = epoch
        result.loss_curve.append(float(np.mean(batch_losses)))
        if epoch % config.snapshot_every == 0 or epoch == config.finetune_epochs:
            result.snapshots.append((epoch, params.copy()))
    return result


# -- run directories ----------------------------------------------------------
#
# A run directory holds the checkpoints plus a manifest.json: schema-versioned,
# sorted keys, no timestamps, checkpoint paths relative to the directory —
# byte-identical for identical runs.


def _write_manifest(path: Path, manifest: dict) -> Path:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def save_pretrain_run(out_dir, result: PretrainResult, config: PretrainConfig, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = "si_model.ckpt"
    save_checkpoint(out / checkpoint, result.params)
    return _write_manifest(
        out / "manifest.json",
        {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "kind": "pretrain",
            "seed": seed,
            "config": asdict(config),
            "model": asdict(result.params.config),
            "checkpoint": checkpoint,
            "best_epoch": result.best_epoch,
            "valid_accuracy": result.valid_accuracy,
            "loss_curve": result.loss_curve,
            "diverged": result.diverged,
            "completed_epochs": result.completed_epochs,
        },
    )


def save_personalize_run(
    out_dir, result: PersonalizeResult, config: FinetuneConfig, extra: dict | None = None
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for epoch, params in result.snapshots:
        name = f"snapshot_{epoch:03d}.ckpt"
        save_checkpoint(out / name, params)
        entries.append({"epoch": epoch, "checkpoint": name})
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "personalize",
        "seed": config.seed,
        "config": asdict(config),
        "snapshots": entries,
        "loss_curve": result.loss_curve,
        "trainable": result.trainable,
        "frozen": result.frozen,
        "diverged": result.diverged,
        "completed_epochs": result.completed_epochs,
    }
    manifest.update(extra or {})
    return _write_manifest(out / "manifest.json", manifest)


def load_manifest(run_dir, kind: str) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    if not path.exists():
        raise TrainingError(f"no manifest.json in {run_dir}")
    manifest = json.loads(path.read_text())
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise TrainingError(
            f"manifest schema version {version!r} unsupported (expected {MANIFEST_SCHEMA_VERSION})"
        )
    if manifest.get("kind") != kind:
        raise TrainingError(f"expected a {kind} run, found {manifest.get('kind')!r}")
    return manifest


def load_pretrain_run(run_dir) -> tuple[dict, ModelParams]:
    manifest = load_manifest(run_dir, "pretrain")
    return manifest, load_checkpoint(Path(run_dir) / manifest["checkpoint"])


def load_personalize_run(run_dir) -> tuple[dict, list]:
    manifest = load_manifest(run_dir, "personalize")
    snapshots = [
        (entry["epoch"], load_checkpoint(Path(run_dir) / entry["checkpoint"]))
        for entry in manifest["snapshots"]
    ]
    return manifest, snapshots
