"""Release acceptance checks, one test per criterion.

Every test prints exactly one ``[criterion NN] PASS/FAIL — detail`` line
(shown with ``-s`` and in failure reports), and the verbose test id carries
the criterion number, so a ``pytest -v`` run reads as one pass/fail line per
criterion either way.  The two study-based criteria share one session-scoped
study run.
"""

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import sklearn.metrics

from nightstage.autodiff import grad_check, no_grad
from nightstage.edf import load_night, night_paths, save_night
from nightstage.evaluation import (
    MetricsReport,
    SnapshotScore,
    compute_metrics,
    experiment_report,
    personalization_gate,
    write_report_csv,
)
from nightstage.losses import (
    LossConfig,
    loss_equivalence_check,
    personalization_loss,
    sequence_ce_loss,
)
from nightstage.model import (
    ModelConfig,
    build_posteriors,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from nightstage.optim import Adam
from nightstage.preprocessing import (
    NormalizationRecord,
    PreprocessedNight,
    StftParams,
    assemble_sequences,
    load_cache,
    night_images,
    preprocess_night,
    save_cache,
)
from nightstage.records import NightRecording
from nightstage.study import StudyConfig, run_personalization_study
from nightstage.synthetic import CohortSpec, generate_synthetic_cohort
from nightstage.training import (
    FinetuneConfig,
    PretrainConfig,
    epoch_order,
    personalize,
    pretrain,
    stack_batch,
)

TINY = ModelConfig(
    freq_bins=16, filters=4, epb_hidden=4, spb_hidden=4, attention_size=4, sequence_length=3
)


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"[criterion {criterion:02d}] {'PASS' if passed else 'FAIL'} — {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def tiny_night(seed: int, n_epochs: int = 8, freq_bins: int = 16, t_cols: int = 5):
    rng = np.random.default_rng(seed)
    return PreprocessedNight(
        subject_id=f"x{seed:02d}",
        night_index=1,
        images=rng.standard_normal((n_epochs, freq_bins, t_cols)),
        labels=rng.integers(0, 5, size=n_epochs),
        norm=NormalizationRecord(
            mode="per_bin", mean=np.zeros(freq_bins), std=np.ones(freq_bins)
        ),
    )


def tiny_batch(seed: int, batch: int = 2):
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((batch, TINY.sequence_length, TINY.freq_bins, 5))
    eye = np.eye(5)
    stages = rng.integers(0, 5, size=(batch, TINY.sequence_length))
    one_hot = eye[stages].transpose(1, 0, 2).reshape(-1, 5)
    return images, one_hot


def test_criterion_01_gradients_match_finite_differences():
    params = init_params(TINY, seed=0)
    images, one_hot = tiny_batch(seed=1)
    si = init_params(TINY, seed=9)
    with no_grad():
        si_probs = build_posteriors(si, images).data
    started = time.time()
    worst = 0.0
    passed = True
    check = grad_check(
        lambda: sequence_ce_loss(
            build_posteriors(params, images, train=True),
            one_hot,
            params,
            lam=1e-3,
            seq_len=TINY.sequence_length,
        ),
        params.tensors,
        step=1e-5,
        tol=1e-4,
    )
    worst, passed = max(worst, check.max_rel_error), passed and check.passed
    for alpha in (0.2, 0.4, 0.8):
        config = LossConfig(lam=1e-3, alpha=alpha)
        check = grad_check(
            lambda: personalization_loss(
                si_probs,
                build_posteriors(params, images, train=True),
                one_hot,
                params,
                config,
                TINY.sequence_length,
            ),
            params.tensors,
            step=1e-5,
            tol=1e-4,
        )
        worst, passed = max(worst, check.max_rel_error), passed and check.passed
    elapsed = time.time() - started
    n_coords = sum(t.data.size for t in params.tensors.values())
    report(
        1,
        passed and elapsed < 60.0,
        f"plain and anchored (alpha 0.2/0.4/0.8) objectives vs central differences "
        f"on every coordinate ({n_coords}): worst rel err {worst:.3e} < 1e-4, {elapsed:.1f}s",
    )


def test_criterion_02_loss_forms_share_gradients_and_differ_by_si_entropy():
    params = init_params(TINY, seed=2)
    images, one_hot = tiny_batch(seed=3)
    si = init_params(TINY, seed=9)
    with no_grad():
        si_probs = build_posteriors(si, images).data
    check = loss_equivalence_check(
        lambda: build_posteriors(params, images, train=True),
        si_probs,
        one_hot,
        params,
        LossConfig(lam=1e-3, alpha=0.4),
        seq_len=TINY.sequence_length,
    )
    constant_gap = abs(check.value_difference - check.entropy_constant)
    report(
        2,
        check.passed
        and check.max_grad_deviation <= 1e-9
        and constant_gap <= 1e-12
        and check.entropy_constant != 0.0,
        f"both objective forms: max gradient deviation {check.max_grad_deviation:.2e} ≤ 1e-9, "
        f"values differ by the pretrained-posterior entropy term within {constant_gap:.2e}",
    )


def test_criterion_03_alpha_zero_is_plain_finetuning_alpha_one_ignores_labels():
    si = init_params(TINY, seed=4)
    night = tiny_night(seed=5)
    config = FinetuneConfig(
        strategy="All",
        alpha=0.0,
        learning_rate=1e-3,
        finetune_epochs=10,
        snapshot_every=10,
        batch_size=4,
        lam=1e-3,
        seed=7,
    )
    run = personalize(si, night, config)
    final = run.snapshots[-1][1]

    # independent route: a hand-rolled plain cross-entropy loop with the same
    # update schedule, never touching the personalization objective
    mirror = si.copy()
    mirror.set_trainable("All")
    opt = Adam(mirror.trainable_tensors(), lr=config.learning_rate)
    sequences = assemble_sequences(night, TINY.sequence_length, stride=1)
    plain_losses = []
    for epoch in range(1, config.finetune_epochs + 1):
        order = epoch_order(config.seed, epoch, len(sequences))
        batch_losses = []
        for i in range(0, len(order), config.batch_size):
            images, one_hot = stack_batch([sequences[j] for j in order[i : i + config.batch_size]])
            mirror.zero_grads()
            loss = sequence_ce_loss(
                build_posteriors(mirror, images, train=True),
                one_hot,
                mirror,
                config.lam,
                TINY.sequence_length,
            )
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.data))
        plain_losses.append(float(np.mean(batch_losses)))
    bitwise = run.loss_curve == plain_losses and all(
        np.array_equal(final.tensors[name].data, mirror.tensors[name].data)
        for name in final.tensors
    )

    # alpha=1: two disagreeing label sets must produce identical gradients
    images, one_hot = tiny_batch(seed=8)
    flipped = one_hot[:, ::-1].copy()
    with no_grad():
        si_probs = build_posteriors(si, images).data
    grads = []
    target = init_params(TINY, seed=6)
    for labels in (one_hot, flipped):
        target.zero_grads()
        personalization_loss(
            si_probs,
            build_posteriors(target, images, train=True),
            labels,
            target,
            LossConfig(lam=1e-3, alpha=1.0),
            TINY.sequence_length,
        ).backward()
        grads.append({n: t.grad.copy() for n, t in target.tensors.items()})
    label_free = all(np.array_equal(grads[0][n], grads[1][n]) for n in grads[0])
    report(
        3,
        bitwise and label_free,
        "alpha=0 run is bit-for-bit a plain cross-entropy loop "
        "and alpha=1 gradients are identical under disagreeing labels",
    )


def test_criterion_04_freezing_strategies_keep_frozen_tensors_bit_identical():
    si = init_params(TINY, seed=10)
    night = tiny_night(seed=11, n_epochs=10)
    started = time.time()
    failures = []
    for strategy in ("All", "Softmax", "EPB+Softmax", "SPB+Softmax"):
        run = personalize(
            si,
            night,
            FinetuneConfig(
                strategy=strategy,
                alpha=0.4,
                learning_rate=1e-3,
                finetune_epochs=50,
                snapshot_every=50,
                batch_size=4,
                seed=12,
            ),
        )
        final = run.snapshots[-1][1]
        for name in run.frozen:
            if final.tensors[name].data.tobytes() != si.tensors[name].data.tobytes():
                failures.append(f"{strategy}:{name} moved")
        for name in run.trainable:
            if np.array_equal(final.tensors[name].data, si.tensors[name].data):
                failures.append(f"{strategy}:{name} never updated")
        if run.completed_epochs != 50:
            failures.append(f"{strategy} stopped at epoch {run.completed_epochs}")
    elapsed = time.time() - started
    report(
        4,
        not failures and elapsed < 300.0,
        f"4 strategies × 50 epochs: frozen tensors byte-identical, trainable ones moved, "
        f"{elapsed:.1f}s" + (f" — {failures}" if failures else ""),
    )


def sine_recording(amplitude: float, noise: float, seed: int, n_epochs: int = 6):
    rng = np.random.default_rng(seed)
    t = np.arange(n_epochs * 30 * 100) / 100.0
    signal = amplitude * np.sin(2 * np.pi * 10.0 * t) + noise * rng.standard_normal(t.size)
    return NightRecording(
        subject_id="sine",
        night_index=1,
        signal=signal,
        sample_rate=100.0,
        annotations=[(0.0, n_epochs * 30.0, "N2")],
        lights_off=0.0,
        lights_on=n_epochs * 30.0,
    )


def test_criterion_05_spectral_images_shape_peak_and_normalization():
    pure = sine_recording(amplitude=30.0, noise=0.0, seed=0)
    images, labels = night_images(pure)
    shape_ok = images.shape == (6, 129, 29) and labels.shape == (6,)
    expected_bin = round(10.0 * 256 / 100)
    peak_bin = int(images.mean(axis=(0, 2)).argmax())

    noisy = sine_recording(amplitude=30.0, noise=0.5, seed=1)
    night = preprocess_night(noisy, norm_mode="per_bin")
    means = night.images.mean(axis=(0, 2))
    stds = night.images.std(axis=(0, 2))
    norm_err = max(np.abs(means).max(), np.abs(stds - 1.0).max())

    rescaled = replace(noisy, signal=noisy.signal * 10.0)
    rescale_err = float(
        np.abs(preprocess_night(rescaled, norm_mode="per_bin").images - night.images).max()
    )
    report(
        5,
        shape_ok and peak_bin == expected_bin and norm_err <= 1e-9 and rescale_err < 1e-6,
        f"129×29 images, 10 Hz peak in bin {peak_bin} (expected {expected_bin}), "
        f"per-bin statistics off by {norm_err:.1e} ≤ 1e-9, "
        f"10× amplitude changes images by {rescale_err:.1e} < 1e-6",
    )


def oracle_metrics(cm: np.ndarray) -> dict:
    truth = np.repeat(np.arange(5), cm.sum(axis=1))
    pred = np.concatenate([np.repeat(np.arange(5), row) for row in cm])
    labels = list(range(5))
    mcm = sklearn.metrics.multilabel_confusion_matrix(truth, pred, labels=labels)
    specificity = float(np.mean([m[0, 0] / (m[0, 0] + m[0, 1]) for m in mcm]))
    return {
        "accuracy": sklearn.metrics.accuracy_score(truth, pred),
        "kappa": sklearn.metrics.cohen_kappa_score(truth, pred, labels=labels),
        "macro_f1": sklearn.metrics.f1_score(truth, pred, labels=labels, average="macro"),
        "sensitivity": sklearn.metrics.recall_score(truth, pred, labels=labels, average="macro"),
        "specificity": specificity,
    }


def test_criterion_06_metrics_match_independent_oracle():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(100):
        cm = rng.integers(1, 50, size=(5, 5))
        ours = compute_metrics(cm)
        expected = oracle_metrics(cm)
        worst = max(
            worst,
            *(abs(getattr(ours, name) - expected[name]) for name in expected),
        )
    diagonal = compute_metrics(np.diag([7, 11, 13, 17, 19]))
    perfect = (
        diagonal.accuracy,
        diagonal.kappa,
        diagonal.macro_f1,
        diagonal.sensitivity,
        diagonal.specificity,
    ) == (1.0, 1.0, 1.0, 1.0, 1.0)
    uniform_kappa = compute_metrics(np.full((5, 5), 3)).kappa
    report(
        6,
        worst <= 1e-12 and perfect and uniform_kappa == 0.0,
        f"100 random confusion matrices: worst deviation from the reference "
        f"implementation {worst:.2e} ≤ 1e-12; diagonal scores 1.0 everywhere; "
        f"uniform matrix gives kappa {uniform_kappa}",
    )


@pytest.fixture(scope="session")
def study_report():
    outcomes = []

    def progress(outcome):
        flags = "".join("+" if ok else "-" for ok in outcome.checks.values())
        print(f"  study seed {outcome.seed}: checks {flags} befores "
              + " ".join(f"{v:.2f}" for v in outcome.befores.values()))
        outcomes.append(outcome)

    started = time.time()
    result = run_personalization_study(seeds=range(10), progress=progress)
    result.elapsed = time.time() - started
    return result


def test_criterion_07_anchored_finetuning_holds_peak_while_plain_declines(study_report):
    n = study_report.n_trend
    per_seed = " ".join(
        f"{o.seed}:{'ok' if o.trend_ok else 'no'}" for o in study_report.outcomes
    )
    report(
        7,
        n >= 8 and study_report.elapsed < 1800.0,
        f"plain rises-then-declines, anchored holds within 1pp of peak and ends ≥ plain, "
        f"both improve: {n}/10 seeds [{per_seed}], {study_report.elapsed:.0f}s < 30min",
    )


def test_criterion_08_full_finetuning_beats_softmax_only(study_report):
    n = study_report.n_control
    per_seed = " ".join(
        f"{o.seed}:{'ok' if o.control_ok else 'no'}" for o in study_report.outcomes
    )
    report(
        8,
        n >= 8,
        f"anchored full-model improvement exceeds Softmax-only: {n}/10 seeds [{per_seed}]",
    )


def crafted_metrics(accuracy: float, rng) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy,
        kappa=float(rng.uniform(0, 1)),
        macro_f1=float(rng.uniform(0, 1)),
        sensitivity=float(rng.uniform(0, 1)),
        specificity=float(rng.uniform(0, 1)),
        per_class_precision=(0.0,) * 5,
        per_class_recall=(0.0,) * 5,
        per_class_f1=(0.0,) * 5,
        per_class_specificity=(0.0,) * 5,
        n_epochs=100,
    )


def test_criterion_09_gate_boundary_and_csv_reaggregation(tmp_path):
    boundary = (
        personalization_gate(0.77, beta=0.77) == "GroupB"
        and personalization_gate(77 / 100, beta=0.77) == "GroupB"
        and personalization_gate(np.nextafter(0.77, 0.0), beta=0.77) == "GroupA"
    )

    # s01 starts exactly at the threshold and must land in the equal-or-above
    # group alongside s03; s02 and s04 fall below it.
    rng = np.random.default_rng(17)
    scores = []
    befores = {"s01": 0.77, "s02": 0.3141592653589793, "s03": 0.9234567891234567, "s04": 0.68}
    for alpha in (0.0, 0.4):
        for subject, before in befores.items():
            for epoch in (0, 50):
                accuracy = before if epoch == 0 else float(rng.uniform(0, 1))
                scores.append(
                    SnapshotScore(
                        subject=subject,
                        night=2,
                        alpha=alpha,
                        strategy="All",
                        snapshot_epoch=epoch,
                        metrics=crafted_metrics(accuracy, rng),
                    )
                )
    tabulated = experiment_report(scores, beta=0.77)
    group_sizes = {
        (entry["alpha"], entry["group"]): entry["n_subjects"] for entry in tabulated.groups
    }
    at_beta_grouped_high = all(
        group_sizes[(alpha, "GroupB")] == 2 and group_sizes[(alpha, "GroupA")] == 2
        for alpha in (0.0, 0.4)
    )

    path = write_report_csv(tmp_path / "report.csv", scores)
    runs = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            key = (float(row["alpha"]), row["strategy"], row["subject"], int(row["night"]))
            runs.setdefault(key, {})[int(row["snapshot_epoch"])] = float(row["acc"])
    regrouped = {}
    for (alpha, strategy, _, _), accs in sorted(runs.items()):
        group = personalization_gate(accs[0], beta=0.77)
        regrouped.setdefault((alpha, strategy, group), []).append(accs[50] - accs[0])
    worst = 0.0
    groups_checked = 0
    for entry in tabulated.groups:
        values = regrouped.get((entry["alpha"], entry["strategy"], entry["group"]), [])
        if entry["n_subjects"] != len(values):
            worst = float("inf")
        if values:
            worst = max(worst, abs(entry["mean_improvement"] - float(np.mean(values))))
            groups_checked += 1
    report(
        9,
        boundary and at_beta_grouped_high and groups_checked == 4 and worst <= 1e-12,
        f"starting accuracy equal to β lands equal-or-above; file-level re-aggregation of "
        f"{groups_checked} group means agrees within {worst:.2e} ≤ 1e-12",
    )


def test_criterion_10_determinism_and_lossless_round_trips(tmp_path):
    spec = CohortSpec(
        n_subjects=2, nights_per_subject=2, epochs_per_night=12, sequence_length=4, shift_std=0.5
    )
    cohort_a = generate_synthetic_cohort(spec, seed=21)
    cohort_b = generate_synthetic_cohort(spec, seed=21)
    cohort_same = all(
        np.array_equal(x.signal, y.signal) and x.annotations == y.annotations
        for x, y in zip(cohort_a, cohort_b)
    )

    nights = [preprocess_night(r) for r in cohort_a]
    model = ModelConfig(
        filters=4, epb_hidden=4, spb_hidden=4, attention_size=4, sequence_length=4
    )
    config = PretrainConfig(learning_rate=1e-3, epochs=2)
    first = pretrain(nights[:2], nights[2:], config, seed=3, model=model)
    second = pretrain(nights[:2], nights[2:], config, seed=3, model=model)
    save_checkpoint(tmp_path / "a.ckpt", first.params)
    save_checkpoint(tmp_path / "b.ckpt", second.params)
    pretrain_same = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    tune = FinetuneConfig(alpha=0.4, learning_rate=1e-3, finetune_epochs=3, seed=5, batch_size=4)
    run_a = personalize(first.params, nights[0], tune)
    run_b = personalize(first.params, nights[0], tune)
    personalize_same = all(
        np.array_equal(pa.tensors[n].data, pb.tensors[n].data)
        for (_, pa), (_, pb) in zip(run_a.snapshots, run_b.snapshots)
        for n in pa.tensors
    )

    for sub, run in (("ra", run_a), ("rb", run_b)):
        save_personalize_run(tmp_path / sub, run, tune)
    manifest_same = (tmp_path / "ra" / "manifest.json").read_bytes() == (
        tmp_path / "rb" / "manifest.json"
    ).read_bytes() and all(
        (tmp_path / "ra" / p.name).read_bytes() == (tmp_path / "rb" / p.name).read_bytes()
        for p in sorted((tmp_path / "ra").glob("*.ckpt"))
    )

    save_cache(tmp_path / "n1.cache", nights[0])
    reloaded = load_cache(tmp_path / "n1.cache")
    save_cache(tmp_path / "n1b.cache", reloaded)
    cache_roundtrip = (tmp_path / "n1.cache").read_bytes() == (tmp_path / "n1b.cache").read_bytes()

    restored = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "a2.ckpt", restored)
    ckpt_roundtrip = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "a2.ckpt").read_bytes()

    # EDF: reading back reproduces the written quantized samples exactly, so a
    # second write→read cycle is the identity on files and values alike
    (tmp_path / "edf1").mkdir()
    (tmp_path / "edf2").mkdir()
    rec = cohort_a[0]
    save_night(tmp_path / "edf1", rec)
    once = load_night(night_paths(tmp_path / "edf1", f"{rec.subject_id}_n1")["edf"])
    save_night(tmp_path / "edf2", once)
    twice = load_night(night_paths(tmp_path / "edf2", f"{rec.subject_id}_n1")["edf"])
    stem = f"{rec.subject_id}_n1"
    edf_roundtrip = (
        np.array_equal(once.signal, twice.signal)
        and once.annotations == rec.annotations == twice.annotations
        and (once.lights_off, once.lights_on) == (rec.lights_off, rec.lights_on)
        and all(
            (tmp_path / "edf1" / f"{stem}{ext}").read_bytes()
            == (tmp_path / "edf2" / f"{stem}{ext}").read_bytes()
            for ext in (".edf", ".annotations.csv", ".meta.json")
        )
    )

    report(
        10,
        cohort_same
        and pretrain_same
        and personalize_same
        and manifest_same
        and cache_roundtrip
        and ckpt_roundtrip
        and edf_roundtrip,
        "same-seed cohort, pretraining and personalization runs are identical "
        "(checkpoints and manifests byte-for-byte); cache, checkpoint and "
        "signal-file round-trips are lossless",
    )
