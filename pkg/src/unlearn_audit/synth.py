"""Synthetic skewed-PII corpus generator.

Produces template emails whose PII group values (area codes, mail domains, or
years) follow a Zipf-like rank distribution, so a clear majority head and a
minority tail exist. Group counts are fixed deterministically before samples
are assigned: counts are non-increasing in group rank and the rarest emitted
group appears exactly once, by construction. Every sample additionally
carries unique random digits/words, giving models a per-sample secret to
memorize.
"""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, Sample
from .rng import derive_rng

NAMES = (
    "alice", "bruno", "carol", "dmitri", "elena", "farid", "grace", "hiro",
    "ines", "jamal", "kira", "liang", "mona", "nadia", "omar", "priya",
    "quinn", "rosa", "sven", "tara",
)
TOPICS = (
    "budget", "pipeline", "roster", "audit", "launch", "outage", "renewal",
    "forecast", "hiring", "travel", "vendor", "training",
)

PII_KINDS = ("phone_us", "email_domain", "year")


def _group_values(pii_kind: str, n_groups: int) -> list[str]:
    if pii_kind == "phone_us":
        return [str(201 + 7 * k) for k in range(n_groups)]
    if pii_kind == "email_domain":
        return [f"corp{k:02d}.com" for k in range(n_groups)]
    if pii_kind == "year":
        return [str(1950 + k) for k in range(n_groups)]
    raise ValueError(f"unknown pii_kind {pii_kind!r}; choose from {PII_KINDS}")


def _zipf_counts(n_pii: int, n_groups: int, exponent: float) -> list[int]:
    """Deterministic per-rank counts: non-increasing, rarest is exactly 1."""
    n_head = n_pii - 1  # one sample is reserved for the rarest group
    weights = np.array([1.0 / (k + 1) ** exponent for k in range(n_groups - 1)])
    shares = weights / weights.sum()
    counts = np.floor(shares * n_head).astype(int)
    remainder = n_head - counts.sum()
    counts[:remainder] += 1
    counts = [int(c) for c in counts if c > 0]
    counts.append(1)
    return counts


def _pii_fragment(pii_kind: str, group: str, rng: np.random.Generator) -> str:
    if pii_kind == "phone_us":
        mid, last = rng.integers(100, 1000), rng.integers(1000, 10000)
        return f"call {group}-{mid}-{last}"
    if pii_kind == "email_domain":
        user = NAMES[rng.integers(0, len(NAMES))]
        tag = rng.integers(10, 100)
        return f"mail {user}{tag}@{group}"
    mid = rng.integers(100, 1000)
    return f"judged in {group} case {mid}"


def synth_corpus(
    n_samples: int,
    zipf_exponent: float = 1.3,
    pii_kind: str = "phone_us",
    seed: int = 0,
    pii_frac: float = 0.85,
    n_groups: int = 24,
) -> Corpus:
    """Generate a deterministic corpus with a skewed PII group distribution."""
    if n_samples < 10:
        raise ValueError("need at least 10 samples")
    rng = derive_rng(seed, "synth", pii_kind)
    n_pii = max(2, int(round(n_samples * pii_frac)))
    counts = _zipf_counts(n_pii, n_groups, zipf_exponent)
    groups = _group_values(pii_kind, n_groups)[: len(counts)]

    assigned: list[str | None] = []
    for g, c in zip(groups, counts):
        assigned.extend([g] * c)
    assigned.extend([None] * (n_samples - len(assigned)))
    order = rng.permutation(len(assigned))

    samples = []
    for i in range(n_samples):
        group = assigned[order[i]]
        name = NAMES[rng.integers(0, len(NAMES))]
        peer = NAMES[rng.integers(0, len(NAMES))]
        topic = TOPICS[rng.integers(0, len(TOPICS))]
        ref = rng.integers(1000, 10000)
        if group is None:
            middle = "nothing on file"
        else:
            middle = _pii_fragment(pii_kind, group, rng)
        text = f"re {topic} {ref} {middle} from {name} to {peer}"
        samples.append(Sample(id=f"s{i:05d}", text=text))
    return Corpus(tuple(samples))
