"""Training objectives.

Three pieces: the sequence cross-entropy used for pretraining, the KL
divergence from the frozen pretrained model's posteriors to the
personalized model's, and the personalization objective that blends them.

The personalization loss is implemented in its simplified form

    (1 − α)·CE(labels, P) + (λ/2)‖Θ‖² − α·(1/L)·ΣΣ P_si · log P,

which differs from the explicit KL-regularized form only by α times the
entropy of the (constant) pretrained posteriors; `loss_equivalence_check`
verifies both the gradient identity and that constant.  The pretrained
model's posteriors enter every formula as plain arrays — no gradient can
flow back into the model that produced them.

Degenerate coefficients keep exact contracts: α=0 builds the very same
graph as `sequence_ce_loss` (plain finetuning, bit-for-bit), and α=1 never
touches the ground-truth labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

EPS_LOG = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-4  # ℓ2 coefficient λ
    alpha: float = 0.0  # KL regularization coefficient

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0.0:
            raise LossError(f"lambda must be nonnegative, got {self.lam}")


def _trainable(params):
    if params is None:
        return {}
    if isinstance(params, dict):
        return {n: t for n, t in params.items() if t.requires_grad}
    return params.trainable_tensors()


def l2_penalty(params, lam: float) -> Tensor:
    """(λ/2)·Σ‖θ‖² over trainable tensors (frozen ones would only add a
    constant, so they are left out)."""
    total = Tensor(np.float64(0.0))
    for t in _trainable(params).values():
        total = total + (t * t).sum()
    return total * (lam / 2.0)


def _check_rows(posteriors, labels):
    if posteriors.shape != np.shape(labels):
        raise LossError(
            f"posteriors shape {posteriors.shape} does not match labels shape {np.shape(labels)}"
        )


def _data_ce(posteriors: Tensor, one_hot: np.ndarray, seq_len: int) -> Tensor:
    """−(1/L)·Σ rows log(probability assigned to the true stage)."""
    picked = (posteriors * one_hot).sum(axis=1)
    return (picked + EPS_LOG).log().sum() * (-1.0 / seq_len)


def sequence_ce_loss(posteriors, one_hot, params=None, lam: float = 0.0,
                     seq_len: int | None = None) -> Tensor:
    """Sequence classification loss: cross-entropy summed over all rows
    (batch × position), divided by the sequence length L, plus the ℓ2 term.

    `posteriors` is (rows, C) row-stochastic (a Tensor to train through);
    `one_hot` is the matching 0/1 array.  `seq_len` defaults to the row
    count, i.e. a single sequence.
    """
    posteriors = posteriors if isinstance(posteriors, Tensor) else Tensor(posteriors)
    one_hot = np.asarray(one_hot, dtype=np.float64)
    _check_rows(posteriors, one_hot)
    length = seq_len if seq_len is not None else posteriors.shape[0]
    return _data_ce(posteriors, one_hot, length) + l2_penalty(params, lam)


def kl_divergence(si_posteriors, posteriors, seq_len: int | None = None) -> Tensor:
    """(1/L)·ΣΣ P_si·log(P_si / P) with the shared log guard; ≥ 0.

    `si_posteriors` is constant data; gradients flow only through
    `posteriors`.
    """
    si = np.asarray(si_posteriors.data if isinstance(si_posteriors, Tensor) else si_posteriors,
                    dtype=np.float64)
    posteriors = posteriors if isinstance(posteriors, Tensor) else Tensor(posteriors)
    if si.shape != posteriors.shape:
        raise LossError(
            f"posterior shapes differ: {si.shape} vs {posteriors.shape}"
        )
    length = seq_len if seq_len is not None else si.shape[0]
    log_si = np.log(si + EPS_LOG)
    log_p = (posteriors + EPS_LOG).log()
    return ((log_p - log_si) * si).sum() * (-1.0 / length)


def _si_cross_entropy(si: np.ndarray, posteriors: Tensor, seq_len: int) -> Tensor:
    """−(1/L)·ΣΣ P_si·log P — the α-weighted distillation term of the
    simplified loss."""
    return ((posteriors + EPS_LOG).log() * si).sum() * (-1.0 / seq_len)


def personalization_loss(si_posteriors, posteriors, one_hot, params, config: LossConfig,
                         seq_len: int | None = None) -> Tensor:
    """Simplified personalization objective.

    α=0 delegates to :func:`sequence_ce_loss` on the same graph (plain
    finetuning, bit-for-bit); α=1 drops the label term entirely; anything
    between blends the two.  `si_posteriors` (required when α>0) never
    receives gradients.
    """
    if config.alpha == 0.0:
        return sequence_ce_loss(posteriors, one_hot, params, config.lam, seq_len)
    if si_posteriors is None:
        raise LossError("si_posteriors are required when alpha > 0")
    posteriors = posteriors if isinstance(posteriors, Tensor) else Tensor(posteriors)
    si = np.asarray(si_posteriors.data if isinstance(si_posteriors, Tensor) else si_posteriors,
                    dtype=np.float64)
    if si.shape != posteriors.shape:
        raise LossError(f"posterior shapes differ: {si.shape} vs {posteriors.shape}")
    length = seq_len if seq_len is not None else posteriors.shape[0]
    reg = l2_penalty(params, config.lam)
    distill = _si_cross_entropy(si, posteriors, length)
    if config.alpha == 1.0:
        return reg + distill  # ground-truth labels are absent from the loss
    one_hot = np.asarray(one_hot, dtype=np.float64)
    _check_rows(posteriors, one_hot)
    data = _data_ce(posteriors, one_hot, length)
    return data * (1.0 - config.alpha) + reg + distill * config.alpha


def personalization_loss_kl_form(si_posteriors, posteriors, one_hot, params,
                                 config: LossConfig, seq_len: int | None = None) -> Tensor:
    """The explicit KL-regularized form: (1−α)·CE + (λ/2)‖Θ‖² + α·KL(P_si‖P).

    Used only to verify the simplified form; values differ by α times the
    entropy of the pretrained posteriors, gradients agree.
    """
    posteriors = posteriors if isinstance(posteriors, Tensor) else Tensor(posteriors)
    one_hot = np.asarray(one_hot, dtype=np.float64)
    _check_rows(posteriors, one_hot)
    length = seq_len if seq_len is not None else posteriors.shape[0]
    data = _data_ce(posteriors, one_hot, length)
    reg = l2_penalty(params, config.lam)
    kl = kl_divergence(si_posteriors, posteriors, length)
    return data * (1.0 - config.alpha) + reg + kl * config.alpha


def si_entropy_constant(si_posteriors, alpha: float, seq_len: int | None = None) -> float:
    """α·(1/L)·ΣΣ P_si·log P_si — the constant separating the two forms."""
    si = np.asarray(si_posteriors, dtype=np.float64)
    length = seq_len if seq_len is not None else si.shape[0]
    return alpha * float(np.sum(si * np.log(si + EPS_LOG))) / length


@dataclass
class EquivalenceReport:
    passed: bool
    alpha: float
    max_grad_deviation: float
    value_difference: float
    entropy_constant: float
    constant_error: float

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"loss_equivalence[{verdict}] alpha={self.alpha} "
            f"max_grad_dev={self.max_grad_deviation:.3e} "
            f"const_err={self.constant_error:.3e}"
        )


def loss_equivalence_check(build_posteriors, si_posteriors, one_hot, params,
                           config: LossConfig, seq_len: int | None = None,
                           tol: float = 1e-9) -> EquivalenceReport:
    """Verify that the simplified and KL forms are the same objective.

    `build_posteriors` must rebuild the posterior Tensor from `params` on
    each call.  Passes iff trainable gradients agree elementwise within
    `tol` and the value gap equals the constant α·(1/L)·ΣΣ P_si·log P_si.
    """
    grads = {}
    values = {}
    for route, fn in (("kl", personalization_loss_kl_form),
                      ("simplified", personalization_loss)):
        for t in _trainable(params).values():
            if t.grad is not None:
                t.grad[...] = 0.0
        loss = fn(si_posteriors, build_posteriors(), one_hot, params, config, seq_len)
        loss.backward()
        values[route] = float(loss.data)
        grads[route] = {n: t.grad.copy() for n, t in _trainable(params).items()}

    max_dev = 0.0
    for name in grads["kl"]:
        dev = float(np.max(np.abs(grads["kl"][name] - grads["simplified"][name])))
        max_dev = max(max_dev, dev)
    constant = si_entropy_constant(si_posteriors, config.alpha, seq_len)
    value_diff = values["kl"] - values["simplified"]
    constant_error = abs(value_diff - constant)
    scale = max(1.0, abs(constant))
    return EquivalenceReport(
        passed=max_dev <= tol and constant_error <= 1e-10 * scale,
        alpha=config.alpha,
        max_grad_deviation=max_dev,
        value_difference=value_diff,
        entropy_constant=constant,
        constant_error=constant_error,
    )
