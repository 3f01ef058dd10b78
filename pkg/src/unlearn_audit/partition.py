"""Forget/keep scenario construction: Random, Canary, and Minority.

All three scenarios are built over one annotated training corpus:

* Random   — a seeded uniform draw of PII-bearing samples forms the forget set.
* Canary   — the same forget samples with their PII group value substituted by
             the corpus's least frequent group; the training set becomes
             keep + canaries. Random and Canary share the keep set, so they
             share one retrain baseline.
* Minority — the forget set is drawn from the rarest PII groups instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, PiiPattern, PiiHistogram, Sample, annotate_pii, build_histogram, least_frequent
from .errors import MissingPiiError, TooFewPiiError
from .rng import derive_rng

CANARY_SUFFIX = "#canary"


@dataclass(frozen=True)
class Partition:
    forget: tuple[str, ...]
    keep: tuple[str, ...]

    def __post_init__(self):
        if not self.forget:
            raise TooFewPiiError("forget set must contain at least one sample")
        overlap = set(self.forget) & set(self.keep)
        if overlap:
            raise ValueError(f"forget and keep overlap: {sorted(overlap)[:3]}")


@dataclass(frozen=True)
class ScenarioSet:
    """The three evaluation scenarios over one training corpus."""

    random: Partition
    canary_train: Corpus
    canary_forget: tuple[str, ...]
    minority: Partition
    least_frequent_group: str

    def __post_init__(self):
        assert len(self.canary_forget) == len(self.random.forget) == len(self.minority.forget)


def split_random(corpus: Corpus, forget_frac: float, seed: int) -> Partition:
    """Uniformly draw the forget set from PII-bearing samples, without replacement."""
    if forget_frac <= 0:
        raise TooFewPiiError(f"forget_frac must be positive, got {forget_frac}")
    n_forget = int(len(corpus) * forget_frac)
    pii_ids = [s.id for s in corpus if s.pii is not None]
    if n_forget < 1:
        raise TooFewPiiError(
            f"forget_frac {forget_frac} of {len(corpus)} samples yields an empty forget set"
        )
    if n_forget > len(pii_ids):
        raise TooFewPiiError(
            f"need {n_forget} PII-bearing samples for the forget set, have {len(pii_ids)}"
        )
    rng = derive_rng(seed, "partition", "random")
    chosen = rng.choice(len(pii_ids), size=n_forget, replace=False)
    forget = {pii_ids[i] for i in chosen}
    all_ids = corpus.ids()
    return Partition(
        forget=tuple(i for i in all_ids if i in forget),
        keep=tuple(i for i in all_ids if i not in forget),
    )


def make_canaries(
    forget_samples: list[Sample], least_frequent_group: str, pattern: PiiPattern
) -> list[Sample]:
    """Copy each sample with its PII group substring replaced by the given group.

    Bytes outside the substituted region are untouched (the substitution may
    change text length, e.g. email domains). Canary ids get a "#canary" suffix.
    """
    rx = pattern.compiled()
    out = []
    for s in forget_samples:
        if s.pii is None:
            raise MissingPiiError(f"sample {s.id!r} has no PII annotation")
        gs, ge = s.pii.group_span
        text = s.text[:gs] + least_frequent_group + s.text[ge:]
        canary = Sample(id=s.id + CANARY_SUFFIX, text=text)
        # Re-annotate so the canary's span/full_value reflect its own text.
        m = rx.search(text)
        if m is not None:
            canary = annotate_pii(Corpus((canary,)), pattern).samples[0]
        out.append(canary)
    return out


def select_minority(corpus: Corpus, hist: PiiHistogram, n: int, seed: int = 0) -> Partition:
    """Forget the n samples whose PII groups are rarest.

    Samples are taken in ascending group-frequency order; within the boundary
    frequency level a seeded uniform draw picks which candidates fill the
    remaining slots.
    """
    if n < 1:
        raise TooFewPiiError(f"minority forget size must be >= 1, got {n}")
    pii_samples = [s for s in corpus if s.pii is not None]
    if n > len(pii_samples):
        raise TooFewPiiError(
            f"need {n} PII-bearing samples for the minority set, have {len(pii_samples)}"
        )
    freq_of = lambda s: hist.counts[s.pii.group_value]
    by_level: dict[int, list[Sample]] = {}
    for s in pii_samples:
        by_level.setdefault(freq_of(s), []).append(s)
    rng = derive_rng(seed, "partition", "minority")
    forget: set[str] = set()
    for level in sorted(by_level):
        candidates = by_level[level]
        remaining = n - len(forget)
        if remaining <= 0:
            break
        if len(candidates) <= remaining:
            forget.update(s.id for s in candidates)
        else:
            picked = rng.choice(len(candidates), size=remaining, replace=False)
            forget.update(candidates[i].id for i in picked)
    all_ids = corpus.ids()
    return Partition(
        forget=tuple(i for i in all_ids if i in forget),
        keep=tuple(i for i in all_ids if i not in forget),
    )


def build_scenarios(
    corpus: Corpus, forget_frac: float, seed: int, pattern: PiiPattern
) -> ScenarioSet:
    """Assemble Random, Canary, and Minority scenarios over one corpus."""
    hist = build_histogram(corpus)
    rare = least_frequent(hist)
    random_part = split_random(corpus, forget_frac, seed)
    forget_samples = [corpus.by_id(i) for i in random_part.forget]
    canaries = make_canaries(forget_samples, rare, pattern)
    canary_train = Corpus(
        tuple(corpus.by_id(i) for i in random_part.keep) + tuple(canaries)
    )
    minority_part = select_minority(corpus, hist, n=len(random_part.forget), seed=seed)
    return ScenarioSet(
        random=random_part,
        canary_train=canary_train,
        canary_forget=tuple(c.id for c in canaries),
        minority=minority_part,
        least_frequent_group=rare,
    )


def scenario_set_to_json(scenarios: ScenarioSet) -> dict:
    return {
        "least_frequent_group": scenarios.least_frequent_group,
        "random": {"forget": list(scenarios.random.forget), "keep": list(scenarios.random.keep)},
        "minority": {
            "forget": list(scenarios.minority.forget),
            "keep": list(scenarios.minority.keep),
        },
        "canary_forget": list(scenarios.canary_forget),
        "canary_texts": {
            cid: scenarios.canary_train.by_id(cid).text for cid in scenarios.canary_forget
        },
    }


def save_scenarios(scenarios: ScenarioSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_set_to_json(scenarios), fh, indent=2, sort_keys=True)
