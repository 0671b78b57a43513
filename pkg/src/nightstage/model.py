"""The sequence-to-sequence sleep stager.

Architecture: an epoch processing block (trainable non-negative filterbank,
bidirectional recurrent pass over a spectral image's time columns, additive
attention pooling into one vector per epoch), a sequence processing block
(bidirectional recurrent pass over the L epoch vectors), and a softmax head
shared across all L positions.

Parameters are partitioned into three named groups — EPB, SPB, Softmax —
which is the unit of freezing during personalization.

Batched layout: a batch of B sequences of L epochs is processed as N = L·B
epoch images stacked l-major (row n = l·B + b), and inside the epoch block
as T·N rows stacked t-major, so every recurrent step slices a contiguous
row block and updates all sequences at once.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import (NonFiniteError, Tensor, concat, lstm_step, lstm_unroll, no_grad,
                       power, reshape, softmax)

CHECKPOINT_MAGIC = b"NSCKPT01"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    freq_bins: int = 129
    filters: int = 32
    epb_hidden: int = 64  # per direction
    spb_hidden: int = 64  # per direction
    attention_size: int = 64
    num_classes: int = 5
    sequence_length: int = 20
    recurrent_norm: bool = False
    norm_momentum: float = 0.99
    norm_eps: float = 1e-5

    def __post_init__(self):
        sizes = {
            "freq_bins": self.freq_bins,
            "filters": self.filters,
            "epb_hidden": self.epb_hidden,
            "spb_hidden": self.spb_hidden,
            "attention_size": self.attention_size,
            "num_classes": self.num_classes,
            "sequence_length": self.sequence_length,
        }
        for name, value in sizes.items():
            if value < 1:
                raise ModelError(f"{name} must be positive, got {value}")
        if self.filters >= self.freq_bins:
            raise ModelError(
                f"filters ({self.filters}) must be smaller than freq_bins ({self.freq_bins})"
            )


GROUP_PREFIXES = {
    "EPB": ("filterbank.", "epb_rnn.", "attention."),
    "SPB": ("spb_rnn.",),
    "Softmax": ("softmax.",),
}

STRATEGIES = {
    "all": frozenset({"EPB", "SPB", "Softmax"}),
    "epb+softmax": frozenset({"EPB", "Softmax"}),
    "spb+softmax": frozenset({"SPB", "Softmax"}),
    "softmax": frozenset({"Softmax"}),
}


def group_of(name: str) -> str:
    for group, prefixes in GROUP_PREFIXES.items():
        if name.startswith(prefixes):
            return group
    raise ModelError(f"parameter {name!r} belongs to no group")


class ModelParams:
    """Named parameter tensors plus non-trainable buffers and their config."""

    def __init__(self, config: ModelConfig, tensors: dict, buffers: dict, seed: int):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers
        self.seed = seed

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names_in_group(self, group: str):
        return [n for n in self.tensors if group_of(n) == group]

    def copy(self) -> "ModelParams":
        tensors = {
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for n, t in self.tensors.items()
        }
        return ModelParams(self.config, tensors, {n: b.copy() for n, b in self.buffers.items()},
                           self.seed)

    def set_trainable(self, strategy: str):
        """Mark groups trainable per the strategy; frozen tensors get no
        gradients at all (their `requires_grad` is cleared)."""
        trainable_groups = strategy_groups(strategy)
        trainable, frozen = [], []
        for name, t in self.tensors.items():
            if group_of(name) in trainable_groups:
                t.requires_grad = True
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                trainable.append(name)
            else:
                t.requires_grad = False
                t.grad = None
                frozen.append(name)
        return trainable, frozen

    def trainable_tensors(self) -> dict:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def zero_grads(self):
        ad.zero_grads(self.trainable_tensors())


def strategy_groups(strategy: str) -> frozenset:
    key = strategy.strip().lower()
    if key not in STRATEGIES:
        raise ModelError(
            f"unknown finetuning strategy {strategy!r}; valid: "
            f"{['All', 'EPB+Softmax', 'SPB+Softmax', 'Softmax']}"
        )
    return STRATEGIES[key]


def select_groups(params: ModelParams, strategy: str):
    """Partition parameter names into (trainable, frozen) per the strategy."""
    groups = strategy_groups(strategy)
    trainable = {n for n in params.tensors if group_of(n) in groups}
    frozen = set(params.tensors) - trainable
    return trainable, frozen


def _triangular_filterbank(freq_bins: int, filters: int) -> np.ndarray:
    """M overlapping triangles spanning the frequency axis linearly, each
    normalized to sum 1 over the bins (with a small floor so no bin is
    permanently dead under the squared reparameterization)."""
    edges = np.linspace(0.0, freq_bins - 1.0, filters + 2)
    bins = np.arange(freq_bins, dtype=np.float64)
    bank = np.zeros((freq_bins, filters))
    for m in range(filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (bins - lo) / max(mid - lo, 1e-12)
        fall = (hi - bins) / max(hi - mid, 1e-12)
        bank[:, m] = np.clip(np.minimum(rise, fall), 0.0, None)
    bank += 1e-4
    return bank / bank.sum(axis=0, keepdims=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization.

    Dense matrices are uniform(−r, r) with r = sqrt(6/(fan_in+fan_out));
    biases start at zero except recurrent forget gates (1.0).  The
    filterbank's raw weights are the square roots of normalized triangular
    filters, so the effective (squared) filters start as unit-sum bandpass
    shapes.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def glorot(name, rows, cols, fan=None):
        fan_in, fan_out = fan if fan else (rows, cols)
        r = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = Tensor(rng.uniform(-r, r, size=(rows, cols)), requires_grad=True)

    def lstm_block(prefix, input_dim, hidden):
        for direction in ("fw", "bw"):
            glorot(f"{prefix}.{direction}.w", input_dim, 4 * hidden)
            glorot(f"{prefix}.{direction}.u", hidden, 4 * hidden)
            bias = np.zeros(4 * hidden)
            bias[hidden : 2 * hidden] = 1.0  # forget gate
            tensors[f"{prefix}.{direction}.b"] = Tensor(bias, requires_grad=True)
            if config.recurrent_norm:
                tensors[f"{prefix}.{direction}.norm_gamma"] = Tensor(
                    np.full(4 * hidden, 0.1), requires_grad=True
                )
                tensors[f"{prefix}.{direction}.norm_beta"] = Tensor(
                    np.zeros(4 * hidden), requires_grad=True
                )
                buffers[f"{prefix}.{direction}.norm_mean"] = np.zeros(4 * hidden)
                buffers[f"{prefix}.{direction}.norm_var"] = np.ones(4 * hidden)

    tensors["filterbank.raw"] = Tensor(
        np.sqrt(_triangular_filterbank(config.freq_bins, config.filters)), requires_grad=True
    )
    lstm_block("epb_rnn", config.filters, config.epb_hidden)
    glorot("attention.w", 2 * config.epb_hidden, config.attention_size)
    tensors["attention.b"] = Tensor(np.zeros(config.attention_size), requires_grad=True)
    r = np.sqrt(6.0 / (config.attention_size + 1))
    tensors["attention.v"] = Tensor(
        rng.uniform(-r, r, size=config.attention_size), requires_grad=True
    )
    lstm_block("spb_rnn", 2 * config.epb_hidden, config.spb_hidden)
    glorot("softmax.w", 2 * config.spb_hidden, config.num_classes)
    tensors["softmax.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return ModelParams(config, tensors, buffers, seed)


def effective_filterbank(params: ModelParams) -> Tensor:
    """Non-negativity by construction: effective weights are raw²."""
    raw = params["filterbank.raw"]
    return raw * raw


# -- forward pass ------------------------------------------------------------


def _norm_preactivation(params, prefix, pre, train):
    cfg = params.config
    gamma = params[f"{prefix}.norm_gamma"]
    beta = params[f"{prefix}.norm_beta"]
    if train:
        mu = pre.mean(axis=0, keepdims=True)
        diff = pre - mu
        var = (diff * diff).mean(axis=0, keepdims=True)
        xhat = diff * power(var + cfg.norm_eps, -0.5)
        m = cfg.norm_momentum
        params.buffers[f"{prefix}.norm_mean"] *= m
        params.buffers[f"{prefix}.norm_mean"] += (1 - m) * mu.data.ravel()
        params.buffers[f"{prefix}.norm_var"] *= m
        params.buffers[f"{prefix}.norm_var"] += (1 - m) * var.data.ravel()
    else:
        mean = params.buffers[f"{prefix}.norm_mean"]
        scale = 1.0 / np.sqrt(params.buffers[f"{prefix}.norm_var"] + cfg.norm_eps)
        xhat = (pre - mean) * scale
    return xhat * gamma + beta


def _check_states(states_data, rows, where):
    if not np.all(np.isfinite(states_data)):
        bad_row = int(np.argwhere(~np.isfinite(states_data))[0, 0])
        raise NonFiniteError(f"non-finite {where} state at step {bad_row // rows}")


def _unidir_lstm_normed(params, prefix, proj, steps, rows, reverse, where, train):
    """Per-step path used when recurrent normalization is on: pre-activations
    are normalized in-graph, so the fused unroll cannot be used."""
    hidden = params[f"{prefix}.u"].shape[0]
    u = params[f"{prefix}.u"]
    h = Tensor(np.zeros((rows, hidden)))
    c = Tensor(np.zeros((rows, hidden)))
    states: list = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        pre = _norm_preactivation(params, prefix, proj[t * rows : (t + 1) * rows] + (h @ u),
                                  train)
        h, c = lstm_step(pre, c)
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError(f"non-finite {where} state at step {t}")
        states[t] = h
    return concat(states, axis=0)


def _bilstm(params, prefix, inputs, steps, rows, where, train):
    """Bidirectional pass; returns the (steps·rows, 2·hidden) stacked states."""
    outs = []
    for direction, reverse in (("fw", False), ("bw", True)):
        p = f"{prefix}.{direction}"
        proj = inputs @ params[f"{p}.w"] + params[f"{p}.b"]
        if params.config.recurrent_norm:
            states = _unidir_lstm_normed(params, p, proj, steps, rows, reverse, where, train)
        else:
            states = lstm_unroll(proj, params[f"{p}.u"], steps, rows, reverse=reverse)
            _check_states(states.data, rows, where)
        outs.append(states)
    return concat(outs, axis=1)


def _epb(params, features, t_cols, n_epochs, train):
    """Epoch block: recurrent pass over spectral columns + attention pooling.

    `features` is (T·N, M) t-major.  Returns (ā (N, 2H1), weights (T, N)).
    """
    cfg = params.config
    a_all = _bilstm(params, "epb_rnn", features, t_cols, n_epochs, "epoch-encoder", train)
    scores = ad.tanh(a_all @ params["attention.w"] + params["attention.b"]) @ reshape(
        params["attention.v"], (cfg.attention_size, 1)
    )
    weights = softmax(reshape(scores, (t_cols, n_epochs)), axis=0)
    weighted = a_all * reshape(weights, (t_cols * n_epochs, 1))
    abar = reshape(weighted, (t_cols, n_epochs, 2 * cfg.epb_hidden)).sum(axis=0)
    return abar, weights


def _spb(params, epoch_vectors, seq_len, batch, train):
    """Sequence block over L epoch vectors stacked l-major: (L·B, 2H2)."""
    return _bilstm(params, "spb_rnn", epoch_vectors, seq_len, batch, "sequence-encoder", train)


def build_posteriors(params: ModelParams, images, train: bool = False) -> Tensor:
    """Full pipeline on a batch.

    `images` is (B, L, F, T) (or (L, F, T) for a single sequence).  Returns
    the posterior Tensor of shape (L·B, num_classes) stacked l-major; use
    :func:`unflatten_posteriors` for the (B, L, C) ndarray view.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ModelError(f"expected (B, L, F, T) images, got shape {images.shape}")
    b, l, f, t = images.shape
    cfg = params.config
    if f != cfg.freq_bins:
        raise ModelError(f"images have {f} frequency bins, model expects {cfg.freq_bins}")
    n = l * b
    # (B, L, F, T) → (T, L, B, F) so EPB rows are t-major over l-major epochs
    stacked = Tensor(np.ascontiguousarray(images.transpose(3, 1, 0, 2)).reshape(t * n, f))
    features = stacked @ effective_filterbank(params)
    abar, _ = _epb(params, features, t, n, train)
    outputs = _spb(params, abar, l, b, train)
    logits = outputs @ params["softmax.w"] + params["softmax.b"]
    return softmax(logits, axis=-1)


def unflatten_posteriors(flat: np.ndarray, batch: int, seq_len: int) -> np.ndarray:
    """(L·B, C) l-major → (B, L, C)."""
    return flat.reshape(seq_len, batch, -1).transpose(1, 0, 2)


def flatten_one_hot(labels, batch: int, seq_len: int, num_classes: int = 5) -> np.ndarray:
    """(B, L) integer labels → (L·B, C) one-hot rows matching build_posteriors."""
    labels = np.asarray(labels, dtype=np.int64).reshape(batch, seq_len)
    return np.eye(num_classes)[labels.T.reshape(-1)]


def forward(params: ModelParams, images) -> np.ndarray:
    """Posterior probabilities as an ndarray: (B, L, C), or (L, C) for one
    sequence.  Pure function of (params, images); never updates buffers."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    with no_grad():
        flat = build_posteriors(params, images, train=False).data
    if single:
        return flat.reshape(images.shape[0], -1)
    return unflatten_posteriors(flat, images.shape[0], images.shape[1])


# -- single-sample views (convenience + test hooks) --------------------------


def filterbank_forward(image: np.ndarray, params: ModelParams) -> np.ndarray:
    """One F×T image → T×M local feature rows x_1..x_T."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != params.config.freq_bins:
        raise ModelError(
            f"expected ({params.config.freq_bins}, T) image, got shape {image.shape}"
        )
    with no_grad():
        return (Tensor(image.T) @ effective_filterbank(params)).data


def epoch_encode(features: np.ndarray, params: ModelParams):
    """T×M features → (ā vector of size 2H1, attention weights of size T)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.config.filters:
        raise ModelError(f"expected (T, {params.config.filters}) features, got {features.shape}")
    with no_grad():
        abar, weights = _epb(params, Tensor(features), features.shape[0], 1, train=False)
    return abar.data.ravel(), weights.data.ravel()


def sequence_encode(epoch_vectors: np.ndarray, params: ModelParams) -> np.ndarray:
    """L×2H1 epoch vectors → L×2H2 sequence-context outputs o_1..o_L."""
    epoch_vectors = np.asarray(epoch_vectors, dtype=np.float64)
    want = 2 * params.config.epb_hidden
    if epoch_vectors.ndim != 2 or epoch_vectors.shape[1] != want:
        raise ModelError(f"expected (L, {want}) epoch vectors, got {epoch_vectors.shape}")
    with no_grad():
        out = _spb(params, Tensor(epoch_vectors), epoch_vectors.shape[0], 1, train=False)
    return out.data


# -- checkpoints -------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian u32 header length, JSON header (format
# tag, version, seed, config echo, tensor and buffer manifests with shapes),
# then each tensor's values as little-endian float32 in manifest order,
# then buffers likewise.


def save_checkpoint(path, params: ModelParams) -> None:
    tensor_names = sorted(params.tensors)
    buffer_names = sorted(params.buffers)
    header = {
        "format": "model-checkpoint",
        "version": 1,
        "seed": params.seed,
        "config": asdict(params.config),
        "tensors": [
            {"name": n, "shape": list(params.tensors[n].data.shape)} for n in tensor_names
        ],
        "buffers": [
            {"name": n, "shape": list(params.buffers[n].shape)} for n in buffer_names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in tensor_names:
            fh.write(params.tensors[n].data.astype("<f4").tobytes())
        for n in buffer_names:
            fh.write(params.buffers[n].astype("<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if header.get("format") != "model-checkpoint" or header.get("version") != 1:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    config = ModelConfig(**header["config"])
    off = 12 + hlen
    tensors, buffers = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(data):
            raise ModelError(f"{path}: checkpoint truncated at tensor {entry['name']!r}")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        tensors[entry["name"]] = Tensor(
            values.astype(np.float64).reshape(shape), requires_grad=True
        )
        off += 4 * count
    for entry in header["buffers"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        buffers[entry["name"]] = values.astype(np.float64).reshape(shape)
        off += 4 * count
    return ModelParams(config, tensors, buffers, header["seed"])
