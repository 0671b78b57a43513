"""Command-line front end: reproducible experiments from one config file.

Subcommands cover the whole pipeline — ``synthesize`` a cohort,
``preprocess`` raw nights into caches, ``pretrain`` the shared model,
``personalize`` it per subject over the alpha/strategy grid, and
``evaluate`` snapshots into reports.  Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.  The only environment knob is
``NIGHTSTAGE_WORKERS`` — how many processes fan out independent
personalization runs; everything else lives in the config file.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from .autodiff import AutodiffError
from .config import (
    ConfigError,
    ExperimentConfig,
    cohort_spec,
    finetune_grid,
    load_config,
    model_config,
    pretrain_config,
    stft_params,
)
from .edf import load_night, save_night
from .evaluation import SnapshotScore, experiment_report, score_night, write_curves_json, write_report_csv
from .model import load_checkpoint
from .preprocessing import load_cache, preprocess_night, save_cache
from .records import trim_in_bed
from .synthetic import SynthesisError, generate_synthetic_cohort
from .training import (
    FinetuneConfig,
    load_manifest,
    personalize,
    pretrain,
    save_personalize_run,
    save_pretrain_run,
)

WORKERS_ENV = "NIGHTSTAGE_WORKERS"


def _load_experiment(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return load_config(args.config)


def _cache_path(cache_dir, subject: str, night: int) -> Path:
    return Path(cache_dir) / f"{subject}_n{night}.cache"


def cmd_synthesize(args) -> int:
    config = _load_experiment(args)
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_synthetic_cohort(cohort_spec(config), seed=seed)
    for rec in cohort:
        paths = save_night(out, rec, channel_label=config.data.channel)
        print(f"{rec.subject_id} night {rec.night_index}: {rec.n_epochs} epochs -> {paths['edf']}")
    print(f"wrote {len(cohort)} night recordings to {out}")
    return 0


def cmd_preprocess(args) -> int:
    config = _load_experiment(args)
    in_dir = Path(args.input if args.input is not None else config.data.input_dir)
    out = Path(args.out if args.out is not None else config.data.cache_dir)
    edf_files = sorted(in_dir.glob("*.edf"))
    if not edf_files:
        raise ConfigError(f"no nights found: no .edf files in {in_dir}")
    out.mkdir(parents=True, exist_ok=True)
    params = stft_params(config)
    for path in edf_files:
        try:
            rec = trim_in_bed(load_night(path, channel=config.data.channel))
            night = preprocess_night(rec, params, norm_mode=config.preprocessing.normalization)
        except (ValueError, OSError) as exc:
            raise type(exc)(f"{path.name}: {exc}") from exc
        cache = _cache_path(out, night.subject_id, night.night_index)
        save_cache(cache, night)
        print(
            f"{night.subject_id} night {night.night_index}: {night.n_epochs} epochs kept, "
            f"{night.excluded_epochs} excluded -> {cache}"
        )
    return 0


def _load_caches(cache_dir):
    files = sorted(Path(cache_dir).glob("*.cache"))
    if not files:
        raise ConfigError(f"no night caches found in {cache_dir}")
    return [load_cache(f) for f in files]


def cmd_pretrain(args) -> int:
    config = _load_experiment(args)
    nights = _load_caches(args.caches if args.caches is not None else config.data.cache_dir)
    subjects = sorted({n.subject_id for n in nights})
    k = config.pretrain.validation_subjects
    if len(subjects) <= k:
        raise ConfigError(
            f"pretraining needs more than {k} subjects "
            f"(pretrain.validation_subjects={k}, found {len(subjects)})"
        )
    valid_subjects = set(subjects[len(subjects) - k :])
    train = [n for n in nights if n.subject_id not in valid_subjects]
    valid = [n for n in nights if n.subject_id in valid_subjects]
    print(f"training on {len(train)} nights, validating on {len(valid)} ({sorted(valid_subjects)})")
    result = pretrain(train, valid, pretrain_config(config), seed=config.seed,
                      model=model_config(config))
    for i, (loss, acc) in enumerate(zip(result.loss_curve, result.valid_accuracy), start=1):
        print(f"epoch {i}: loss {loss:.4f}, validation accuracy {acc:.4f}")
    if result.diverged:
        print("run diverged; keeping last finite checkpoint")
    manifest = save_pretrain_run(args.out, result, pretrain_config(config), seed=config.seed)
    print(
        f"retained epoch {result.best_epoch} "
        f"(validation accuracy {max(result.valid_accuracy, default=float('nan')):.4f}) -> {manifest.parent}"
    )
    return 0


def _resolve_checkpoint(path) -> Path:
    path = Path(path)
    if path.is_dir():
        manifest = load_manifest(path, "pretrain")
        return path / manifest["checkpoint"]
    return path


def _run_personalization(job) -> str:
    ckpt_path, cache_path, config_dict, out_dir, subject = job
    si = load_checkpoint(ckpt_path)
    night = load_cache(cache_path)
    config = FinetuneConfig(**config_dict)
    result = personalize(si, night, config)
    save_personalize_run(
        out_dir,
        result,
        config,
        extra={"subject": subject, "finetuned_night": night.night_index},
    )
    return str(out_dir)


def cmd_personalize(args) -> int:
    config = _load_experiment(args)
    ckpt = _resolve_checkpoint(args.si)
    cache_dir = args.caches if args.caches is not None else config.data.cache_dir
    cache = _cache_path(cache_dir, args.subject, config.personalize.night)
    if not cache.exists():
        raise FileNotFoundError(
            f"no cached night {config.personalize.night} for subject {args.subject!r}: {cache}"
        )
    out = Path(args.out)
    jobs = []
    for run_config in finetune_grid(config):
        run_dir = out / f"{args.subject}_alpha{run_config.alpha:g}_{run_config.strategy}"
        jobs.append((str(ckpt), str(cache), asdict(run_config), str(run_dir), args.subject))
    workers = int(os.environ.get(WORKERS_ENV, "1") or "1")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finished = list(pool.map(_run_personalization, jobs))
    else:
        finished = [_run_personalization(job) for job in jobs]
    for run_dir in finished:
        print(f"personalized run -> {run_dir}")
    print(f"{len(finished)} runs complete")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_experiment(args)
    runs_dir = Path(args.runs)
    run_dirs = sorted(d for d in runs_dir.iterdir() if (d / "manifest.json").exists())
    if not run_dirs:
        raise ConfigError(f"no personalization runs found in {runs_dir}")
    cache_dir = args.caches if args.caches is not None else config.data.cache_dir
    scores = []
    test_nights = {}
    for run_dir in run_dirs:
        manifest = load_manifest(run_dir, "personalize")
        subject = manifest["subject"]
        if subject not in test_nights:
            cache = _cache_path(cache_dir, subject, config.evaluate.test_night)
            if not cache.exists():
                raise FileNotFoundError(
                    f"missing test night {config.evaluate.test_night} for "
                    f"subject {subject!r}: {cache}"
                )
            test_nights[subject] = load_cache(cache)
        night = test_nights[subject]
        for entry in manifest["snapshots"]:
            params = load_checkpoint(run_dir / entry["checkpoint"])
            score = score_night(
                params, night, batch_size=config.evaluate.batch_size,
                fusion=config.evaluate.fusion,
            )
            scores.append(
                SnapshotScore(
                    subject=subject,
                    night=night.night_index,
                    alpha=manifest["config"]["alpha"],
                    strategy=manifest["config"]["strategy"],
                    snapshot_epoch=entry["epoch"],
                    metrics=score.metrics,
                )
            )
    report = experiment_report(scores, beta=config.evaluate.beta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_report_csv(out / "report.csv", scores)
    json_path = write_curves_json(out / "curves.json", report)

    for combo in sorted({(r["alpha"], r["strategy"]) for r in report.table}):
        alpha, strategy = combo
        rows = [r for r in report.table if (r["alpha"], r["strategy"]) == combo]
        n = rows[0]["n_subjects"]
        print(f"alpha={alpha:g} strategy={strategy} (n={n} subjects)")
        print("  metric    before             after")
        for row in rows:
            print(
                f"  {row['metric']:<8}  {row['before_mean']:.4f} ± {row['before_std']:.4f}"
                f"    {row['after_mean']:.4f} ± {row['after_std']:.4f}"
            )
    for group in report.groups:
        print(
            f"beta={report.beta:g} {group['group']} alpha={group['alpha']:g} "
            f"strategy={group['strategy']}: n={group['n_subjects']} "
            f"mean improvement {group['mean_improvement']:+.4f}"
        )
    print(f"report -> {csv_path}")
    print(f"curves -> {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nightstage",
        description="Sleep staging with single-night personalization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate a synthetic cohort as EDF nights")
    p.add_argument("--config", help="experiment config (TOML)")
    p.add_argument("--out", required=True, help="output directory for night files")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("preprocess", help="turn raw nights into model-ready caches")
    p.add_argument("--config", help="experiment config (TOML)")
    p.add_argument("--in", dest="input", help="directory of .edf nights")
    p.add_argument("--out", help="cache output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="train the subject-independent model")
    p.add_argument("--config", help="experiment config (TOML)")
    p.add_argument("--caches", help="night cache directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("personalize", help="finetune per subject over the alpha/strategy grid")
    p.add_argument("--config", help="experiment config (TOML)")
    p.add_argument("--si", required=True, help="pretrain run directory or checkpoint file")
    p.add_argument("--caches", help="night cache directory")
    p.add_argument("--subject", required=True, help="target subject id")
    p.add_argument("--out", required=True, help="output directory for run folders")
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("evaluate", help="score snapshots on held-out nights and tabulate")
    p.add_argument("--config", help="experiment config (TOML)")
    p.add_argument("--runs", required=True, help="directory of personalization runs")
    p.add_argument("--caches", help="night cache directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SynthesisError) as exc:
        # SynthesisError only ever reports an unusable cohort description,
        # which is a configuration problem like any other.
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, AutodiffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
