"""Corpus ingestion, PII annotation, frequency histograms, and tokenization.

A corpus is an ordered, immutable collection of text samples. PII is located
with configurable regular expressions; each sample carries at most one
annotated span (the leftmost match). Group values (e.g. a phone number's
area code) drive the frequency analysis that defines data minorities.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    BadPatternError,
    BadTokenError,
    CorpusIoError,
    DuplicateIdError,
    EmptyCorpusError,
    EmptyHistogramError,
    ParseError,
)

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"


@dataclass(frozen=True)
class PiiSpan:
    """Location and value of one PII occurrence within a sample's text.

    ``span`` is the (start, end) offsets of the full match; ``group_span``
    locates the group substring (the minority identifier) inside the text.
    """

    span: tuple[int, int]
    group_span: tuple[int, int]
    full_value: str
    group_value: str


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    pii: Optional[PiiSpan] = None


@dataclass(frozen=True)
class PiiPattern:
    """A named regular expression with a capture group extracting the group value."""

    name: str
    match_pattern: str
    group_extractor: int = 1

    def compiled(self) -> re.Pattern:
        try:
            rx = re.compile(self.match_pattern)
        except re.error as exc:
            raise BadPatternError(f"pattern {self.name!r} does not compile: {exc}")
        if self.group_extractor < 0 or self.group_extractor > rx.groups:
            raise BadPatternError(
                f"pattern {self.name!r} has {rx.groups} groups, "
                f"extractor index {self.group_extractor} is out of range"
            )
        return rx


BUILTIN_PATTERNS = {
    # US phone NNN-NNN-NNNN; group = area code (first three digits).
    "phone_us": PiiPattern("phone_us", r"\b(\d{3})-\d{3}-\d{4}\b", 1),
    # Email; group = domain (text after '@' up to whitespace).
    "email_domain": PiiPattern("email_domain", r"\b[^\s@]+@(\S+)", 1),
    # Four-digit year 19xx/20xx.
    "year": PiiPattern("year", r"\b((?:19|20)\d{2})\b", 1),
}


def get_pattern(name: str) -> PiiPattern:
    if name not in BUILTIN_PATTERNS:
        raise BadPatternError(
            f"unknown pattern {name!r}; built-ins: {sorted(BUILTIN_PATTERNS)}"
        )
    return BUILTIN_PATTERNS[name]


@dataclass(frozen=True)
class Corpus:
    samples: tuple[Sample, ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        idx = {s.id: i for i, s in enumerate(self.samples)}
        if len(idx) != len(self.samples):
            seen = set()
            for s in self.samples:
                if s.id in seen:
                    raise DuplicateIdError(f"duplicate sample id {s.id!r}")
                seen.add(s.id)
        object.__setattr__(self, "_index", idx)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def by_id(self, sample_id: str) -> Sample:
        return self.samples[self._index[sample_id]]

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, ids: Sequence[str]) -> "Corpus":
        return Corpus(tuple(self.by_id(i) for i in ids))


def load_corpus(path) -> Corpus:
    """Load a JSONL corpus: one object per line with "id" and "text" strings."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CorpusIoError(f"cannot read corpus {path}: {exc}")
    samples = []
    seen = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}")
        if not isinstance(obj, dict):
            raise ParseError(line_no, "record is not an object")
        if not isinstance(obj.get("id"), str):
            raise ParseError(line_no, 'missing or non-string "id"')
        if not isinstance(obj.get("text"), str):
            raise ParseError(line_no, 'missing or non-string "text"')
        if obj["id"] in seen:
            raise DuplicateIdError(f"line {line_no}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        samples.append(Sample(id=obj["id"], text=obj["text"]))
    return Corpus(tuple(samples))


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus:
            fh.write(json.dumps({"id": s.id, "text": s.text}) + "\n")


def annotate_pii(corpus: Corpus, pattern: PiiPattern) -> Corpus:
    """Attach the leftmost pattern match of each sample as its PII span."""
    rx = pattern.compiled()
    out = []
    for s in corpus:
        m = rx.search(s.text)
        if m is None:
            out.append(replace(s, pii=None))
            continue
        gi = pattern.group_extractor
        out.append(
            replace(
                s,
                pii=PiiSpan(
                    span=m.span(0),
                    group_span=m.span(gi),
                    full_value=m.group(0),
                    group_value=m.group(gi),
                ),
            )
        )
    return Corpus(tuple(out))


@dataclass(frozen=True)
class PiiHistogram:
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def build_histogram(corpus: Corpus) -> PiiHistogram:
    counts = Counter(s.pii.group_value for s in corpus if s.pii is not None)
    return PiiHistogram(dict(counts))


def least_frequent(hist: PiiHistogram) -> str:
    """Group with the minimum count; ties broken by smallest group value."""
    if not hist.counts:
        raise EmptyHistogramError("histogram is empty")
    return min(hist.counts, key=lambda g: (hist.counts[g], g))


def export_histogram(hist: PiiHistogram, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(hist.counts.items())), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Tokenization


@dataclass(frozen=True)
class Vocab:
    """Frequency-ranked token inventory with <bos>/<eos>/<unk> specials at 0..2."""

    tokens: tuple[str, ...]
    mode: str  # "char" | "whitespace"

    def __post_init__(self):
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def token_id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)


def _tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "whitespace":
        return text.split()
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def build_vocab(corpus: Corpus, mode: str = "char", max_size: int = 512) -> Vocab:
    """Rank tokens by descending frequency (ties lexicographic), keep max_size."""
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for s in corpus:
        counts.update(_tokenize(s.text, mode))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:max_size]
    return Vocab(tokens=(BOS, EOS, UNK, *ranked), mode=mode)


def encode(vocab: Vocab, text: str, max_len: int = 0) -> np.ndarray:
    """<bos> + token ids (+ <eos>), truncated to max_len ids (0 = no limit)."""
    ids = [vocab.bos_id]
    ids.extend(vocab.token_id(t) for t in _tokenize(text, vocab.mode))
    ids.append(vocab.eos_id)
    if max_len and len(ids) > max_len:
        ids = ids[:max_len]
    return np.asarray(ids, dtype=np.int64)


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    """Inverse of encode for in-vocab sequences; specials are dropped. Debug aid."""
    specials = {vocab.bos_id, vocab.eos_id}
    toks = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise BadTokenError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i in specials:
            continue
        toks.append(vocab.tokens[i])
    sep = "" if vocab.mode == "char" else " "
    return sep.join(toks)


def encode_corpus(vocab: Vocab, corpus: Corpus, max_len: int = 0) -> list[np.ndarray]:
    return [encode(vocab, s.text, max_len) for s in corpus]
