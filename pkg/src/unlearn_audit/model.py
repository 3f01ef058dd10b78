"""Tiny causal language model with exact analytic gradients, in float64.

Architecture: the context_window previous token embeddings are concatenated
into one vector, passed through hidden_blocks residual feed-forward blocks
(two weight matrices + biases each, tanh inside), and projected to vocabulary
logits. Contexts shorter than the window are left-padded with the sequence's
leading token (the <bos> marker produced by encoding).

Parameter tensors carry a total front-to-back layer order (embedding first,
output projection last), which defines "the last k layers" for partial
retraining. Everything is numpy float64; gradients are hand-derived and
validated against central finite differences.
"""

from __future__ import annotations

import json
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadTokenError, NumericError

Gradients = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 12
    context_window: int = 8
    hidden_blocks: int = 2
    hidden_dim: int = 48
    init_scale: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "context_window", "hidden_blocks", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def concat_dim(self) -> int:
        return self.context_window * self.embed_dim


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Canonical (name, shape, layer_index) list, front to back."""
    d = config.concat_dim
    specs = [("embedding", (config.vocab_size, config.embed_dim), 0)]
    for i in range(config.hidden_blocks):
        layer = i + 1
        specs += [
            (f"blocks.{i}.w1", (config.hidden_dim, d), layer),
            (f"blocks.{i}.b1", (config.hidden_dim,), layer),
            (f"blocks.{i}.w2", (d, config.hidden_dim), layer),
            (f"blocks.{i}.b2", (d,), layer),
        ]
    out_layer = config.hidden_blocks + 1
    specs += [
        ("out.w", (config.vocab_size, d), out_layer),
        ("out.b", (config.vocab_size,), out_layer),
    ]
    return specs


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def layer_of(self) -> dict[str, int]:
        return {name: layer for name, _, layer in param_specs(self.config)}

    def n_layers(self) -> int:
        return self.config.hidden_blocks + 2


def init_model(config: ModelConfig) -> ModelState:
    """Draw all parameters i.i.d. uniform in [-init_scale, init_scale]."""
    rng = np.random.default_rng(config.init_seed)
    params = {
        name: rng.uniform(-config.init_scale, config.init_scale, size=shape)
        for name, shape, _ in param_specs(config)
    }
    return ModelState(config, params)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 5
    optimizer: str = "adamw"  # "adamw" | "sgd"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0


@dataclass(frozen=True)
class DpSgdConfig:
    noise_scale: float = 5e-4
    clip_norm: float = 1.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")


@dataclass
class LossStats:
    per_token_nll: list[np.ndarray]
    mean_nll: float
    token_count: int


@dataclass
class ForwardCache:
    ctx: np.ndarray          # (B, T, W) int64
    tgt: np.ndarray          # (B, T) int64
    mask: np.ndarray         # (B, T) float64, 1.0 on real predictions
    lengths: np.ndarray      # (B,) predictions per sequence
    hs: list[np.ndarray]     # h_0 .. h_L, each (B, T, D)
    zs: list[np.ndarray]     # tanh activations per block, (B, T, H)
    probs: np.ndarray        # (B, T, V) softmax rows
    logp: np.ndarray         # (B, T, V) log softmax rows


def _pack(batch: Sequence[np.ndarray], window: int):
    """Stack variable-length sequences into padded (context, target) tensors."""
    lengths = np.array([len(s) - 1 for s in batch], dtype=np.int64)
    b, t_max = len(batch), int(lengths.max())
    ctx = np.zeros((b, t_max, window), dtype=np.int64)
    tgt = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=np.float64)
    for i, seq in enumerate(batch):
        n = len(seq) - 1
        padded = np.concatenate([np.full(window, seq[0], dtype=np.int64), seq[:-1]])
        ctx[i, :n] = sliding_window_view(padded, window)[1 : n + 1]
        tgt[i, :n] = seq[1:]
        mask[i, :n] = 1.0
    return ctx, tgt, mask, lengths


def forward_loss(model: ModelState, batch: Sequence[np.ndarray]) -> tuple[LossStats, ForwardCache]:
    """Next-token NLL of every predicted position, plus activations for backward."""
    v = model.config.vocab_size
    for seq in batch:
        if len(seq) < 2:
            raise ValueError("every sequence needs at least 2 tokens (one prediction)")
        if seq.min() < 0 or seq.max() >= v:
            raise BadTokenError(f"token id outside [0, {v})")
    ctx, tgt, mask, lengths = _pack(batch, model.config.context_window)
    b, t_max = tgt.shape
    p = model.params
    h = p["embedding"][ctx].reshape(b, t_max, model.config.concat_dim)
    hs, zs = [h], []
    for i in range(model.config.hidden_blocks):
        a = h @ p[f"blocks.{i}.w1"].T + p[f"blocks.{i}.b1"]
        z = np.tanh(a)
        h = h + z @ p[f"blocks.{i}.w2"].T + p[f"blocks.{i}.b2"]
        zs.append(z)
        hs.append(h)
    logits = h @ p["out.w"].T + p["out.b"]
    with np.errstate(over="ignore", invalid="ignore"):
        logits -= logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        logp = logits - log_z
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0] * mask
    token_count = int(lengths.sum())
    stats = LossStats(
        per_token_nll=[nll[i, : lengths[i]].copy() for i in range(b)],
        mean_nll=float(nll.sum() / token_count),
        token_count=token_count,
    )
    cache = ForwardCache(ctx, tgt, mask, lengths, hs, zs, np.exp(logp), logp)
    return stats, cache


def _dlogits(cache: ForwardCache, weights: np.ndarray) -> np.ndarray:
    b, t = cache.tgt.shape
    d = cache.probs * weights[..., None]
    d[np.arange(b)[:, None], np.arange(t)[None, :], cache.tgt] -= weights
    return d


def _flat_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over (batch, position) of outer(a, b): (B,T,M),(B,T,N) -> (M,N)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _backward_weighted(model: ModelState, cache: ForwardCache, weights: np.ndarray) -> Gradients:
    """Gradient of sum_{positions} weight * nll, fully reduced over the batch."""
    p = model.params
    dlog = _dlogits(cache, weights)
    grads: Gradients = {
        "out.b": dlog.sum((0, 1)),
        "out.w": _flat_gemm(dlog, cache.hs[-1]),
    }
    dh = dlog @ p["out.w"]
    for i in reversed(range(model.config.hidden_blocks)):
        z, h_prev = cache.zs[i], cache.hs[i]
        grads[f"blocks.{i}.b2"] = dh.sum((0, 1))
        grads[f"blocks.{i}.w2"] = _flat_gemm(dh, z)
        da = (dh @ p[f"blocks.{i}.w2"]) * (1.0 - z * z)
        grads[f"blocks.{i}.b1"] = da.sum((0, 1))
        grads[f"blocks.{i}.w1"] = _flat_gemm(da, h_prev)
        dh = dh + da @ p[f"blocks.{i}.w1"]
    cfg = model.config
    onehot = np.eye(cfg.vocab_size)[cache.ctx.reshape(-1)]
    grads["embedding"] = onehot.T @ dh.reshape(-1, cfg.embed_dim)
    return grads


def backward(model: ModelState, batch: Sequence[np.ndarray], cache: ForwardCache) -> Gradients:
    """Exact gradient of the token-weighted mean NLL returned by forward_loss."""
    weights = cache.mask / cache.mask.sum()
    return _backward_weighted(model, cache, weights)


def sample_weights(cache: ForwardCache) -> np.ndarray:
    """Position weights making each sequence's rows sum to its token-mean NLL."""
    return cache.mask / cache.lengths[:, None]


def per_sample_grads(model: ModelState, cache: ForwardCache,
                     tgt_override: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Per-sequence gradients of each sequence's token-mean NLL.

    Returns arrays shaped (B, *param_shape). ``tgt_override`` substitutes the
    prediction targets (used by the random-label unlearning objective).
    """
    weights = sample_weights(cache)
    if tgt_override is None:
        dlog = _dlogits(cache, weights)
    else:
        b, t = cache.tgt.shape
        dlog = cache.probs * weights[..., None]
        dlog[np.arange(b)[:, None], np.arange(t)[None, :], tgt_override] -= weights
    return per_sample_backprop(model, cache, dlog)


def _batched_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """per-sequence sum over positions of outer(a, b): (B,T,M),(B,T,N) -> (B,M,N)."""
    return np.matmul(a.transpose(0, 2, 1), b)


def per_sample_backprop(model: ModelState, cache: ForwardCache,
                        dlog: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate arbitrary per-position logit gradients, per sequence."""
    p = model.params
    grads = {
        "out.b": dlog.sum(1),
        "out.w": _batched_gemm(dlog, cache.hs[-1]),
    }
    dh = dlog @ p["out.w"]
    for i in reversed(range(model.config.hidden_blocks)):
        z, h_prev = cache.zs[i], cache.hs[i]
        grads[f"blocks.{i}.b2"] = dh.sum(1)
        grads[f"blocks.{i}.w2"] = _batched_gemm(dh, z)
        da = (dh @ p[f"blocks.{i}.w2"]) * (1.0 - z * z)
        grads[f"blocks.{i}.b1"] = da.sum(1)
        grads[f"blocks.{i}.w1"] = _batched_gemm(da, h_prev)
        dh = dh + da @ p[f"blocks.{i}.w1"]
    cfg = model.config
    b, t = cache.tgt.shape
    onehot = np.eye(cfg.vocab_size)[cache.ctx].reshape(b, t * cfg.context_window, cfg.vocab_size)
    dx = dh.reshape(b, t * cfg.context_window, cfg.embed_dim)
    grads["embedding"] = np.matmul(onehot.transpose(0, 2, 1), dx)
    return grads


def mean_of_per_sample(stacked: dict[str, np.ndarray]) -> Gradients:
    return {k: v.mean(axis=0) for k, v in stacked.items()}


def check_finite_grads(grads: Gradients) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adamw_state(model: ModelState) -> AdamWState:
    zeros = lambda: {k: np.zeros_like(p) for k, p in model.params.items()}
    return AdamWState(step=0, m=zeros(), v=zeros())


def adamw_step(
    model: ModelState,
    grads: Gradients,
    state: AdamWState,
    cfg: TrainConfig,
    trainable: Optional[set[str]] = None,
) -> tuple[ModelState, AdamWState]:
    """Decoupled-weight-decay adaptive-moment update with bias correction.

    Mutates model and state in place; frozen tensors (outside ``trainable``)
    are left bit-identical, including their moment buffers.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, theta in model.params.items():
        if trainable is not None and name not in trainable:
            continue
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        theta -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.eps))
        if cfg.weight_decay != 0.0:
            theta -= cfg.learning_rate * cfg.weight_decay * theta
    return model, state


def sgd_step(
    model: ModelState,
    grads: Gradients,
    cfg: TrainConfig,
    trainable: Optional[set[str]] = None,
) -> ModelState:
    for name, theta in model.params.items():
        if trainable is not None and name not in trainable:
            continue
        theta -= cfg.learning_rate * grads[name]
    return model


class Stepper:
    """One optimizer bound to one model, dispatching on TrainConfig.optimizer."""

    def __init__(self, model: ModelState, cfg: TrainConfig, trainable: Optional[set[str]] = None):
        self.cfg = cfg
        self.trainable = trainable
        self.adamw = init_adamw_state(model) if cfg.optimizer == "adamw" else None
        if cfg.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    def apply(self, model: ModelState, grads: Gradients) -> None:
        check_finite_grads(grads)
        if self.adamw is not None:
            adamw_step(model, grads, self.adamw, self.cfg, self.trainable)
        else:
            sgd_step(model, grads, self.cfg, self.trainable)


def clip_factors(stacked: dict[str, np.ndarray], clip_norm: float) -> np.ndarray:
    """Per-sample scale factors bringing each gradient's global L2 norm under the bound."""
    b = next(iter(stacked.values())).shape[0]
    sq = np.zeros(b)
    for g in stacked.values():
        sq += (g.reshape(b, -1) ** 2).sum(axis=1)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, np.divide(clip_norm, norms, out=np.full(b, np.inf), where=norms > 0))


def dpsgd_step(
    model: ModelState,
    stacked_grads: dict[str, np.ndarray],
    dp: DpSgdConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    trainable: Optional[set[str]] = None,
) -> ModelState:
    """Clip per-sample gradients, average, add Gaussian noise, take an SGD step.

    Noise std is noise_scale * clip_norm / B per coordinate, applied to the
    averaged clipped gradient; the inner update is plain SGD so the noise
    calibration stays interpretable.
    """
    b = next(iter(stacked_grads.values())).shape[0]
    factors = clip_factors(stacked_grads, dp.clip_norm)
    noisy: Gradients = {}
    for name, _, _ in param_specs(model.config):
        g = stacked_grads[name]
        scaled = g * factors.reshape((b,) + (1,) * (g.ndim - 1))
        mean = scaled.mean(axis=0)
        if dp.noise_scale > 0.0:
            mean = mean + rng.normal(0.0, dp.noise_scale * dp.clip_norm / b, size=mean.shape)
        noisy[name] = mean
    check_finite_grads(noisy)
    return sgd_step(model, noisy, cfg, trainable)


# ---------------------------------------------------------------------------
# Training loop and evaluation


def _minibatches(n: int, batch_size: int, order: np.ndarray) -> Iterable[np.ndarray]:
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_step(
    model: ModelState,
    batch: Sequence[np.ndarray],
    stepper: Stepper,
    dp: Optional[DpSgdConfig] = None,
    dp_rng: Optional[np.random.Generator] = None,
    trainable: Optional[set[str]] = None,
) -> float:
    """One optimization step on the sample-mean NLL objective. Returns batch loss."""
    stats, cache = forward_loss(model, batch)
    if not math.isfinite(stats.mean_nll):
        raise NumericError("non-finite loss")
    stacked = per_sample_grads(model, cache)
    if dp is not None:
        dpsgd_step(model, stacked, dp, stepper.cfg, dp_rng, trainable)
    else:
        stepper.apply(model, mean_of_per_sample(stacked))
    return stats.mean_nll


def train(
    model: ModelState,
    data: Sequence[np.ndarray],
    train_config: TrainConfig,
    dp_config: Optional[DpSgdConfig] = None,
) -> ModelState:
    """Epochs of shuffled minibatch passes; DP-SGD steps when dp_config is given."""
    if len(data) == 0:
        raise ValueError("training data is empty")
    work = model.copy()
    stepper = Stepper(work, train_config)
    shuffle_rng = np.random.default_rng(train_config.shuffle_seed)
    dp_rng = np.random.default_rng(dp_config.noise_seed) if dp_config else None
    n = len(data)
    for _ in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        for idx in _minibatches(n, train_config.batch_size, order):
            train_step(work, [data[i] for i in idx], stepper, dp_config, dp_rng)
    return work


def perplexity(model: ModelState, data: Sequence[np.ndarray], batch_size: int = 128) -> float:
    """exp of the token-weighted mean NLL over the whole evaluation set."""
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        stats, _ = forward_loss(model, data[start : start + batch_size])
        total += stats.mean_nll * stats.token_count
        count += stats.token_count
    mean = total / count
    try:
        return math.exp(mean)
    except OverflowError:
        return math.inf


# ---------------------------------------------------------------------------
# Partial-retraining support


def layer_mask(model: ModelState, k: int) -> tuple[set[str], float]:
    """Mark the last k layers trainable; returns (tensor names, trainable ratio).

    Layers are ordered embedding, blocks front-to-back, output projection;
    k >= total layer count makes everything trainable (ratio 1).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n_layers = model.n_layers()
    cutoff = n_layers - min(k, n_layers)
    layer_of = model.layer_of()
    names = {name for name, layer in layer_of.items() if layer >= cutoff}
    trainable = sum(model.params[n].size for n in names)
    return names, trainable / model.param_count()


def reinit_layers(model: ModelState, trainable: set[str], seed: int) -> ModelState:
    """Redraw masked tensors from the init distribution; others stay bit-identical."""
    out = model.copy()
    rng = np.random.default_rng(seed)
    s = model.config.init_scale
    for name, shape, _ in param_specs(model.config):
        if name in trainable:
            out.params[name] = rng.uniform(-s, s, size=shape)
    return out


# ---------------------------------------------------------------------------
# Checkpoint I/O

CHECKPOINT_VERSION = 1


def save_model(model: ModelState, path) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": model.config.__dict__}
    arrays = {f"param:{k}": v for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(data["__meta__"].tobytes().decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        config = ModelConfig(**meta["config"])
        params = {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
    expected = {name for name, _, _ in param_specs(config)}
    if set(params) != expected:
        raise ValueError("checkpoint tensors do not match the stored config")
    return ModelState(config, params)


def model_hash(model: ModelState) -> str:
    """Stable digest of config plus all tensors in canonical order."""
    h = hashlib.sha256()
    h.update(json.dumps(model.config.__dict__, sort_keys=True).encode())
    for name, _, _ in param_specs(model.config):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()
