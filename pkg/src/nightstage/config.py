"""Experiment configuration: one TOML file drives every pipeline stage.

Each TOML table maps onto a small dataclass below; unknown tables and keys
are rejected by name so typos fail loudly instead of silently running with
defaults.  The defaults encode the reference settings used throughout: 2 s
windows hopped by 1 s through a 256-point FFT, sequences of L=20 epochs,
learning rate 1e-4, 50 finetuning epochs with snapshots every 5, the alpha
grid {0, 0.2, 0.4, 0.6, 0.8}, and the accuracy gate at 0.77.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import ModelConfig, strategy_groups
from .preprocessing import StftParams
from .synthetic import CohortSpec
from .training import FinetuneConfig, PretrainConfig


class ConfigError(ValueError):
    """Raised for malformed configuration files (a usage error)."""


@dataclass
class DataSection:
    input_dir: str = "nights"
    cache_dir: str = "caches"
    channel: str = "EEG Fpz-Cz"  # exact (stripped) EDF signal label


@dataclass
class SyntheticSection:
    n_subjects: int = 10
    nights_per_subject: int = 2
    epochs_per_night: int = 200
    sample_rate: float = 100.0
    shift_std: float = 1.0
    gain_log_std: float = 0.2
    night_shift_jitter: float = 0.1
    night_gain_jitter: float = 0.05
    epoch_shift_jitter: float = 0.05
    rms_uv: float = 30.0
    self_transition: float = 0.85
    label_noise: float = 0.0
    subject_prefix: str = "s"


@dataclass
class PreprocessingSection:
    frame_sec: float = 2.0
    hop_sec: float = 1.0
    fft_size: int = 256
    eps: float = 1e-6
    normalization: str = "per_bin"


@dataclass
class ModelSection:
    filters: int = 32
    epb_hidden: int = 64
    spb_hidden: int = 64
    attention_size: int = 64
    sequence_length: int = 20
    recurrent_norm: bool = False


@dataclass
class PretrainSection:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    lam: float = 1e-4
    validation_subjects: int = 1


@dataclass
class PersonalizeSection:
    alphas: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    strategies: list = field(default_factory=lambda: ["All"])
    learning_rate: float = 1e-4
    finetune_epochs: int = 50
    snapshot_every: int = 5
    batch_size: int = 8
    lam: float = 1e-4
    night: int = 1  # which night of the target subject is finetuned on


@dataclass
class EvaluateSection:
    beta: float = 0.77
    fusion: str = "geometric"
    batch_size: int = 8
    test_night: int = 2


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    preprocessing: PreprocessingSection = field(default_factory=PreprocessingSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    personalize: PersonalizeSection = field(default_factory=PersonalizeSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)


_SECTIONS = {
    "data": DataSection,
    "synthetic": SyntheticSection,
    "preprocessing": PreprocessingSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "personalize": PersonalizeSection,
    "evaluate": EvaluateSection,
}


def _build_section(name: str, cls, table: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key '{name}.{unknown[0]}' (valid: {sorted(known)})")
    return cls(**table)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {}
    for name, table in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section '{name}' (valid: {sorted(_SECTIONS)})")
        if not isinstance(table, dict):
            raise ConfigError(f"'{name}' must be a table, got {type(table).__name__}")
        sections[name] = _build_section(name, _SECTIONS[name], table)
    config = ExperimentConfig(seed=seed, **sections)
    validate_config(config)
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_dict(raw)


def validate_config(config: ExperimentConfig) -> None:
    """Cross-field checks that individual stage objects cannot see."""
    for alpha in config.personalize.alphas:
        if not 0.0 <= float(alpha) <= 1.0:
            raise ConfigError(f"personalize.alphas entry {alpha} outside [0, 1]")
    if not config.personalize.alphas:
        raise ConfigError("personalize.alphas must not be empty")
    if not config.personalize.strategies:
        raise ConfigError("personalize.strategies must not be empty")
    for strategy in config.personalize.strategies:
        try:
            strategy_groups(strategy)
        except ValueError as exc:
            raise ConfigError(f"personalize.strategies: {exc}") from exc
    if config.preprocessing.normalization not in ("per_bin", "global"):
        raise ConfigError(
            f"preprocessing.normalization must be 'per_bin' or 'global', "
            f"got {config.preprocessing.normalization!r}"
        )
    if config.evaluate.fusion not in ("geometric", "last"):
        raise ConfigError(
            f"evaluate.fusion must be 'geometric' or 'last', got {config.evaluate.fusion!r}"
        )
    if not 0.0 <= config.evaluate.beta <= 1.0:
        raise ConfigError(f"evaluate.beta must be in [0, 1], got {config.evaluate.beta}")


# -- adapters into the stage objects ------------------------------------------


def stft_params(config: ExperimentConfig) -> StftParams:
    p = config.preprocessing
    return StftParams(frame_sec=p.frame_sec, hop_sec=p.hop_sec, fft_size=p.fft_size, eps=p.eps)


def cohort_spec(config: ExperimentConfig) -> CohortSpec:
    return CohortSpec(
        sequence_length=config.model.sequence_length, **asdict(config.synthetic)
    )


def model_config(config: ExperimentConfig) -> ModelConfig:
    m = config.model
    return ModelConfig(
        freq_bins=config.preprocessing.fft_size // 2 + 1,
        filters=m.filters,
        epb_hidden=m.epb_hidden,
        spb_hidden=m.spb_hidden,
        attention_size=m.attention_size,
        sequence_length=m.sequence_length,
        recurrent_norm=m.recurrent_norm,
    )


def pretrain_config(config: ExperimentConfig) -> PretrainConfig:
    p = config.pretrain
    return PretrainConfig(
        learning_rate=p.learning_rate, epochs=p.epochs, batch_size=p.batch_size, lam=p.lam
    )


def finetune_grid(config: ExperimentConfig) -> list:
    """One FinetuneConfig per (alpha, strategy) cell, all sharing the seed."""
    p = config.personalize
    return [
        FinetuneConfig(
            strategy=strategy,
            alpha=float(alpha),
            learning_rate=p.learning_rate,
            finetune_epochs=p.finetune_epochs,
            snapshot_every=p.snapshot_every,
            batch_size=p.batch_size,
            lam=p.lam,
            seed=config.seed,
        )
        for alpha in p.alphas
        for strategy in p.strategies
    ]
