"""Unlearning algorithms under a shared gradient-computation budget.

Seven methods are provided: random labels (rl), gradient ascent (ga), partial
retraining with reinitialization (euk) or continued training (cfk) of the
last k layers, the combined ascent/descent objective (neggrad_plus), the
teacher-student distillation objective (scrub), and noisy fine-tuning with
DP-SGD (langevin).

Budgeting follows one rule: a Complexity Unit is the gradient budget of one
epoch over the forget set, every method is capped at max_units (10 by
default), and partially-trainable methods are billed at their trainable
parameter fraction while visiting proportionally more keep samples. The
checkpoint returned is the first epoch whose training-set perplexity exceeds
the no-unlearning baseline by more than one point, else the last epoch.

All methods draw from named RNG streams derived from the config seed, so
methods that use the keep set identically consume identical sample streams;
degenerate hyperparameters (e.g. the combined objective with beta = 1)
reproduce plain keep-set fine-tuning step for step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BudgetExceededError, NumericError
from .model import (
    DpSgdConfig,
    ForwardCache,
    Gradients,
    ModelState,
    Stepper,
    TrainConfig,
    dpsgd_step,
    forward_loss,
    mean_of_per_sample,
    per_sample_backprop,
    per_sample_grads,
    perplexity,
    layer_mask,
    reinit_layers,
    sample_weights,
    _minibatches,
)
from .rng import derive_int_seed, derive_rng

METHODS = ("rl", "euk", "cfk", "ga", "neggrad_plus", "scrub", "langevin")

# Epoch caps per method family: forget-only and keep-only methods get 10,
# methods cycling both sets get 5 (each epoch costs two units).
EPOCH_CAP = {
    "rl": 10,
    "ga": 10,
    "euk": 10,
    "cfk": 10,
    "langevin": 10,
    "neggrad_plus": 5,
    "scrub": 5,
}


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    learning_rate: float = 1e-5
    batch_size: int = 32
    optimizer: str = "adamw"
    neggrad_beta: float = 0.999
    scrub_alpha: float = 0.999
    scrub_beta: float = 1.0
    scrub_gamma: float = 0.01
    k: int = 3
    dp: DpSgdConfig = field(default_factory=DpSgdConfig)
    max_units: float = 10.0
    max_epochs: Optional[int] = None  # optional tighter cap (ablations)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS and self.method != "no_unlearn":
            raise ValueError(f"unknown method {self.method!r}")
        # Interior values balance the two sets; the boundaries are the
        # degenerate diagnostic limits (0 = pure ascent, 1 = keep-only).
        if not (0.0 <= self.neggrad_beta <= 1.0) and self.method == "neggrad_plus":
            raise ValueError("neggrad_beta must lie in [0, 1]")
        if min(self.scrub_alpha, self.scrub_beta, self.scrub_gamma) < 0:
            raise ValueError("scrub weights must be >= 0")
        if self.max_units < 1:
            raise ValueError("max_units must be >= 1")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
        )

    def epoch_cap(self) -> int:
        cap = EPOCH_CAP[self.method]
        if self.max_epochs is not None:
            cap = min(cap, self.max_epochs)
        return cap


@dataclass
class ComplexityLedger:
    """Accounting of gradient budget in Complexity Units (epoch over U samples)."""

    unit_size: int
    max_units: float
    charged: float = 0.0
    events: list[tuple[int, int, float]] = field(default_factory=list)

    def cost(self, samples: int, param_fraction: float) -> float:
        return samples * param_fraction / self.unit_size

    def can_charge(self, samples: int, param_fraction: float) -> bool:
        return self.charged + self.cost(samples, param_fraction) <= self.max_units + 1e-9

    def charge(self, samples: int, param_fraction: float, step: int = 0) -> "ComplexityLedger":
        if not self.can_charge(samples, param_fraction):
            raise BudgetExceededError(
                f"charging {samples} samples at fraction {param_fraction} would exceed "
                f"{self.max_units} units (charged {self.charged:.3f})"
            )
        self.charged += self.cost(samples, param_fraction)
        self.events.append((step, samples, param_fraction))
        return self

    def to_json(self) -> dict:
        return {
            "unit_size": self.unit_size,
            "max_units": self.max_units,
            "charged": self.charged,
            "events": [list(e) for e in self.events],
        }


@dataclass
class UnlearnOutcome:
    method: str
    checkpoints: list[ModelState]
    train_perplexities: list[float]
    selected: ModelState
    selected_epoch: int  # 1-based; 0 means the input model was kept
    ledger: ComplexityLedger
    diverged: Optional[str] = None


def select_checkpoint(train_perplexities: Sequence[float], baseline_perplexity: float) -> int:
    """First epoch whose perplexity exceeds baseline + 1 (strictly), else the last."""
    for epoch, ppl in enumerate(train_perplexities, start=1):
        if ppl > baseline_perplexity + 1.0:
            return epoch
    return len(train_perplexities)


def _streams(cfg: UnlearnConfig) -> dict[str, np.random.Generator]:
    return {
        name: derive_rng(cfg.seed, "unlearn", name)
        for name in ("keep", "forget", "labels")
    }


def _epoch_driver(
    m_learn: ModelState,
    cfg: UnlearnConfig,
    unit_size: int,
    param_fraction: float,
    planned_samples: int,
    run_epoch: Callable[[ModelState, int], int],
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
    start_model: Optional[ModelState] = None,
) -> UnlearnOutcome:
    """Run budget-gated epochs, snapshot each, and apply the stop rule.

    An epoch is only started if its full cost fits the remaining budget. A
    non-finite loss or gradient aborts the run; the partially updated epoch is
    discarded and selection happens over the finite checkpoints.
    """
    work = (start_model if start_model is not None else m_learn).copy()
    ledger = ComplexityLedger(unit_size=unit_size, max_units=cfg.max_units)
    checkpoints: list[ModelState] = []
    ppls: list[float] = []
    diverged = None
    for epoch in range(1, cfg.epoch_cap() + 1):
        if not ledger.can_charge(planned_samples, param_fraction):
            break
        try:
            actual = run_epoch(work, epoch)
        except NumericError as exc:
            diverged = str(exc)
            break
        ledger.charge(actual, param_fraction, step=epoch)
        checkpoints.append(work.copy())
        ppls.append(perplexity(work, train_eval))
    selected_epoch = select_checkpoint(ppls, baseline_ppl) if checkpoints else 0
    selected = checkpoints[selected_epoch - 1] if selected_epoch else m_learn.copy()
    return UnlearnOutcome(
        method=cfg.method,
        checkpoints=checkpoints,
        train_perplexities=ppls,
        selected=selected,
        selected_epoch=selected_epoch,
        ledger=ledger,
        diverged=diverged,
    )


def _keep_subsample_epoch(
    work: ModelState,
    keep: Sequence[np.ndarray],
    size: int,
    cfg: UnlearnConfig,
    keep_rng: np.random.Generator,
    apply_batch: Callable[[ModelState, list[np.ndarray]], None],
) -> int:
    idx = keep_rng.choice(len(keep), size=size, replace=False)
    for chunk in _minibatches(size, cfg.batch_size, idx):
        apply_batch(work, [keep[i] for i in chunk])
    return size


def finetune_keep(
    m_learn: ModelState,
    keep: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
    unit_size: int,
) -> UnlearnOutcome:
    """Plain fine-tuning on per-epoch keep subsamples of size U.

    This is the reference trajectory the degenerate parameterizations of the
    combined-objective methods collapse onto; it is also what the noisy
    variant becomes when its noise and clipping are disabled.
    """
    streams = _streams(cfg)
    stepper = Stepper(m_learn, cfg.train_config())
    size = min(unit_size, len(keep))

    def apply_batch(work, batch):
        _, cache = forward_loss(work, batch)
        stepper.apply(work, mean_of_per_sample(per_sample_grads(work, cache)))

    return _epoch_driver(
        m_learn, cfg, unit_size, 1.0, size,
        lambda work, _e: _keep_subsample_epoch(work, keep, size, cfg, streams["keep"], apply_batch),
        train_eval, baseline_ppl,
    )


def unlearn_random_labels(
    m_learn: ModelState,
    forget: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
) -> UnlearnOutcome:
    """Train on the forget set with targets redrawn uniformly from the vocabulary."""
    streams = _streams(cfg)
    stepper = Stepper(m_learn, cfg.train_config())
    vocab_size = m_learn.config.vocab_size
    labels_rng = streams["labels"]

    def run_epoch(work, _epoch):
        order = streams["forget"].permutation(len(forget))
        for chunk in _minibatches(len(forget), cfg.batch_size, order):
            batch = [forget[i] for i in chunk]
            _, cache = forward_loss(work, batch)
            random_tgt = labels_rng.integers(0, vocab_size, size=cache.tgt.shape)
            stacked = per_sample_grads(work, cache, tgt_override=random_tgt)
            stepper.apply(work, mean_of_per_sample(stacked))
        return len(forget)

    return _epoch_driver(
        m_learn, cfg, len(forget), 1.0, len(forget), run_epoch, train_eval, baseline_ppl
    )


def unlearn_gradient_ascent(
    m_learn: ModelState,
    forget: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
) -> UnlearnOutcome:
    """Descent on the negated forget-set loss (i.e. ascent on the loss)."""
    streams = _streams(cfg)
    stepper = Stepper(m_learn, cfg.train_config())

    def run_epoch(work, _epoch):
        order = streams["forget"].permutation(len(forget))
        for chunk in _minibatches(len(forget), cfg.batch_size, order):
            batch = [forget[i] for i in chunk]
            _, cache = forward_loss(work, batch)
            g = mean_of_per_sample(per_sample_grads(work, cache))
            stepper.apply(work, {k: -v for k, v in g.items()})
        return len(forget)

    return _epoch_driver(
        m_learn, cfg, len(forget), 1.0, len(forget), run_epoch, train_eval, baseline_ppl
    )


def _partial_layers(
    m_learn: ModelState,
    cfg: UnlearnConfig,
    keep: Sequence[np.ndarray],
    reinit: bool,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
    unit_size: int,
) -> UnlearnOutcome:
    trainable, ratio = layer_mask(m_learn, cfg.k)
    start = m_learn
    if reinit:
        start = reinit_layers(m_learn, trainable, derive_int_seed(cfg.seed, "unlearn", "reinit"))
    streams = _streams(cfg)
    stepper = Stepper(m_learn, cfg.train_config(), trainable=trainable)
    size = min(int(np.ceil(unit_size / ratio)), len(keep))

    def apply_batch(work, batch):
        _, cache = forward_loss(work, batch)
        stepper.apply(work, mean_of_per_sample(per_sample_grads(work, cache)))

    return _epoch_driver(
        m_learn, cfg, unit_size, ratio, size,
        lambda work, _e: _keep_subsample_epoch(work, keep, size, cfg, streams["keep"], apply_batch),
        train_eval, baseline_ppl,
        start_model=start,
    )


def unlearn_euk(m_learn, keep, cfg, train_eval, baseline_ppl, unit_size) -> UnlearnOutcome:
    """Reinitialize the last k layers, then retrain them on keep subsamples."""
    return _partial_layers(m_learn, cfg, keep, True, train_eval, baseline_ppl, unit_size)


def unlearn_cfk(m_learn, keep, cfg, train_eval, baseline_ppl, unit_size) -> UnlearnOutcome:
    """Continue training the last k layers on keep subsamples, without reinit."""
    return _partial_layers(m_learn, cfg, keep, False, train_eval, baseline_ppl, unit_size)


def kl_per_sample_grads(
    teacher_probs: np.ndarray, student: ModelState, cache: ForwardCache
) -> dict[str, np.ndarray]:
    """Per-sequence gradients of token-mean KL(teacher || student) w.r.t. the student."""
    w = sample_weights(cache)
    dlog = (cache.probs - teacher_probs) * w[..., None]
    return per_sample_backprop(student, cache, dlog)


def kl_teacher_student(
    teacher: ModelState, student: ModelState, batch: Sequence[np.ndarray]
) -> tuple[float, Gradients]:
    """Token-averaged KL(teacher || student) over all predicted positions.

    Returns the scalar divergence and its gradient with respect to the
    student parameters.
    """
    _, t_cache = forward_loss(teacher, batch)
    _, s_cache = forward_loss(student, batch)
    mask = s_cache.mask
    per_pos = (t_cache.probs * (t_cache.logp - s_cache.logp)).sum(axis=-1) * mask
    n = mask.sum()
    value = float(per_pos.sum() / n)
    w = mask / n
    dlog = (s_cache.probs - t_cache.probs) * w[..., None]
    stacked = per_sample_backprop(student, s_cache, dlog)
    return value, {k: v.sum(axis=0) for k, v in stacked.items()}


def unlearn_neggrad_plus(
    m_learn: ModelState,
    forget: Sequence[np.ndarray],
    keep: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
) -> UnlearnOutcome:
    """Descent on beta * keep-loss - (1 - beta) * forget-loss.

    Each epoch cycles a U-sample keep subsample against the U-sample forget
    set; every step combines one keep and one forget minibatch into a single
    update, so an epoch costs two units.
    """
    streams = _streams(cfg)
    stepper = Stepper(m_learn, cfg.train_config())
    beta = cfg.neggrad_beta
    size = min(len(forget), len(keep))

    def run_epoch(work, _epoch):
        keep_idx = streams["keep"].choice(len(keep), size=size, replace=False)
        forget_idx = streams["forget"].permutation(len(forget))
        processed = 0
        for k_chunk, f_chunk in zip(
            _minibatches(size, cfg.batch_size, keep_idx),
            _minibatches(len(forget), cfg.batch_size, forget_idx),
        ):
            _, k_cache = forward_loss(work, [keep[i] for i in k_chunk])
            g_keep = mean_of_per_sample(per_sample_grads(work, k_cache))
            _, f_cache = forward_loss(work, [forget[i] for i in f_chunk])
            g_forget = mean_of_per_sample(per_sample_grads(work, f_cache))
            combined = {
                name: beta * g_keep[name] - (1.0 - beta) * g_forget[name] for name in g_keep
            }
            stepper.apply(work, combined)
            processed += len(k_chunk) + len(f_chunk)
        return processed

    return _epoch_driver(
        m_learn, cfg, len(forget), 1.0, size + len(forget), run_epoch, train_eval, baseline_ppl
    )


def unlearn_scrub(
    m_learn: ModelState,
    forget: Sequence[np.ndarray],
    keep: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
) -> UnlearnOutcome:
    """Teacher-student objective: keep samples are pulled toward the frozen
    teacher (KL) and the data (loss), forget samples are pushed away (negated KL)."""
    teacher = m_learn.copy()
    streams = _streams(cfg)
    stepper = Stepper(m_learn, cfg.train_config())
    a, b, g = cfg.scrub_alpha, cfg.scrub_beta, cfg.scrub_gamma
    size = min(len(forget), len(keep))

    def set_grads(work, batch):
        _, t_cache = forward_loss(teacher, batch)
        _, s_cache = forward_loss(work, batch)
        kl = mean_of_per_sample(kl_per_sample_grads(t_cache.probs, work, s_cache))
        nll = mean_of_per_sample(per_sample_grads(work, s_cache))
        return kl, nll

    def run_epoch(work, _epoch):
        keep_idx = streams["keep"].choice(len(keep), size=size, replace=False)
        forget_idx = streams["forget"].permutation(len(forget))
        processed = 0
        for k_chunk, f_chunk in zip(
            _minibatches(size, cfg.batch_size, keep_idx),
            _minibatches(len(forget), cfg.batch_size, forget_idx),
        ):
            kl_k, nll_k = set_grads(work, [keep[i] for i in k_chunk])
            kl_f, _ = set_grads(work, [forget[i] for i in f_chunk])
            combined = {
                name: a * kl_k[name] + b * nll_k[name] - g * kl_f[name] for name in nll_k
            }
            stepper.apply(work, combined)
            processed += len(k_chunk) + len(f_chunk)
        return processed

    return _epoch_driver(
        m_learn, cfg, len(forget), 1.0, size + len(forget), run_epoch, train_eval, baseline_ppl
    )


def unlearn_langevin(
    m_learn: ModelState,
    keep: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
    unit_size: int,
) -> UnlearnOutcome:
    """DP-SGD fine-tuning on keep subsamples; pairs with a DP-SGD-trained model."""
    streams = _streams(cfg)
    dp_rng = np.random.default_rng(cfg.dp.noise_seed)
    train_cfg = cfg.train_config()
    size = min(unit_size, len(keep))

    def apply_batch(work, batch):
        _, cache = forward_loss(work, batch)
        stacked = per_sample_grads(work, cache)
        dpsgd_step(work, stacked, cfg.dp, train_cfg, dp_rng)

    return _epoch_driver(
        m_learn, cfg, unit_size, 1.0, size,
        lambda work, _e: _keep_subsample_epoch(work, keep, size, cfg, streams["keep"], apply_batch),
        train_eval, baseline_ppl,
    )


def no_unlearn(m_learn: ModelState, unit_size: int, cfg: UnlearnConfig) -> UnlearnOutcome:
    """Pseudo-method: keep the learned model unchanged (the No-Unlearn row)."""
    return UnlearnOutcome(
        method="no_unlearn",
        checkpoints=[],
        train_perplexities=[],
        selected=m_learn.copy(),
        selected_epoch=0,
        ledger=ComplexityLedger(unit_size=unit_size, max_units=cfg.max_units),
    )


def run_unlearn(
    m_learn: ModelState,
    forget: Sequence[np.ndarray],
    keep: Sequence[np.ndarray],
    cfg: UnlearnConfig,
    train_eval: Sequence[np.ndarray],
    baseline_ppl: float,
) -> UnlearnOutcome:
    """Dispatch one unlearning method on one prepared scenario."""
    unit = len(forget)
    if cfg.method == "no_unlearn":
        return no_unlearn(m_learn, unit, cfg)
    if cfg.method == "rl":
        return unlearn_random_labels(m_learn, forget, cfg, train_eval, baseline_ppl)
    if cfg.method == "ga":
        return unlearn_gradient_ascent(m_learn, forget, cfg, train_eval, baseline_ppl)
    if cfg.method == "euk":
        return unlearn_euk(m_learn, keep, cfg, train_eval, baseline_ppl, unit)
    if cfg.method == "cfk":
        return unlearn_cfk(m_learn, keep, cfg, train_eval, baseline_ppl, unit)
    if cfg.method == "neggrad_plus":
        return unlearn_neggrad_plus(m_learn, forget, keep, cfg, train_eval, baseline_ppl)
    if cfg.method == "scrub":
        return unlearn_scrub(m_learn, forget, keep, cfg, train_eval, baseline_ppl)
    if cfg.method == "langevin":
        return unlearn_langevin(m_learn, keep, cfg, train_eval, baseline_ppl, unit)
    raise ValueError(f"unknown method {cfg.method!r}")
