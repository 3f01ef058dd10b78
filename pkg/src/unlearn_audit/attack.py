"""Membership-inference scoring: loss, zlib-normalized loss, and min-k%.

Every attack maps a sample to a real score oriented member-high: the more a
model's statistics suggest the sample was trained on, the larger the score.
One AUC routine then serves all attacks.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus
from .model import LossStats, ModelState, forward_loss

log = logging.getLogger(__name__)

ATTACKS = ("loss", "zlib", "min_k")


@dataclass(frozen=True)
class AttackConfig:
    min_k_percent: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.min_k_percent <= 100.0):
            raise ValueError("min_k_percent must lie in (0, 100]")


@dataclass(frozen=True)
class AttackScore:
    sample_id: str
    attack: str
    score: float
    is_member: bool


def score_loss_mia(stats: LossStats) -> float:
    """Negated mean NLL: lower loss means more member-like."""
    return -stats.mean_nll


def compressed_len(text: str) -> int:
    """Byte length of the text as a zlib stream at the default level.

    Includes the stream header and checksum; the empty string compresses to
    8 bytes.
    """
    return len(zlib.compress(text.encode("utf-8")))


def score_zlib_mia(stats: LossStats, text: str) -> float:
    """Loss normalized by compressed size, negated for member-high orientation."""
    return -stats.mean_nll / compressed_len(text)


def score_min_k(stats: LossStats, config: AttackConfig) -> float:
    """Negated mean NLL of the least likely K% of tokens (at least one token)."""
    nll = np.concatenate(stats.per_token_nll)
    m = max(1, int(math.floor(config.min_k_percent / 100.0 * len(nll))))
    worst = np.sort(nll)[-m:]
    return float(-worst.mean())


def _score_one(stats: LossStats, text: str, attack: str, config: AttackConfig) -> float:
    if attack == "loss":
        return score_loss_mia(stats)
    if attack == "zlib":
        return score_zlib_mia(stats, text)
    if attack == "min_k":
        return score_min_k(stats, config)
    raise ValueError(f"unknown attack {attack!r}")


@dataclass
class ScoredPopulation:
    scores: list[AttackScore]
    excluded: list[str] = field(default_factory=list)


def score_population(
    model: ModelState,
    forget: Corpus,
    test: Corpus,
    forget_seqs: Sequence[np.ndarray],
    test_seqs: Sequence[np.ndarray],
    attack: str,
    config: AttackConfig = AttackConfig(),
    batch_size: int = 128,
) -> ScoredPopulation:
    """Score the forget (member) and test (non-member) populations.

    Samples with non-finite loss statistics are excluded and reported in the
    result rather than silently dropped.
    """
    if len(forget) == 0 or len(test) == 0:
        raise ValueError("both populations must be nonempty")
    out = ScoredPopulation(scores=[])

    def run(corpus: Corpus, seqs, member: bool):
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            samples = corpus.samples[start : start + batch_size]
            stats, _ = forward_loss(model, chunk)
            for i, s in enumerate(samples):
                per_tok = stats.per_token_nll[i]
                one = LossStats([per_tok], float(per_tok.mean()), len(per_tok))
                if not math.isfinite(one.mean_nll):
                    log.warning("excluding %s from %s scoring: non-finite loss", s.id, attack)
                    out.excluded.append(s.id)
                    continue
                out.scores.append(
                    AttackScore(s.id, attack, _score_one(one, s.text, attack, config), member)
                )

    run(forget, forget_seqs, True)
    run(test, test_seqs, False)
    out.scores.sort(key=lambda a: (not a.is_member, a.sample_id))
    return out
