import math
import zlib

import numpy as np
import pytest

from unlearn_audit.attack import (
    AttackConfig,
    compressed_len,
    score_loss_mia,
    score_min_k,
    score_population,
    score_zlib_mia,
)
from unlearn_audit.corpus import Corpus, Sample, build_vocab, encode_corpus
from unlearn_audit.metrics import auc
from unlearn_audit.model import LossStats

from conftest import tiny_model

# Byte lengths of the reference zlib stream (default level, header + checksum
# included), frozen from the stdlib compressor.
ZLIB_GOLDENS = {
    "": 8,
    "call me at 713-853-1234": 31,
    "re budget 4021 call 484-292-7311 from alice to bruno": 60,
    "the quick brown fox jumps over the lazy dog " * 4: 54,
}


def stats_of(nll_values):
    arr = np.asarray(nll_values, dtype=np.float64)
    return LossStats([arr], float(arr.mean()), len(arr))


class TestLossMia:
    def test_sign_convention(self):
        assert score_loss_mia(stats_of([2.0, 2.0])) == -2.0

    def test_monotone_in_loss(self):
        assert score_loss_mia(stats_of([1.0])) > score_loss_mia(stats_of([3.0]))

    def test_zero_loss(self):
        assert score_loss_mia(stats_of([0.0])) == 0.0


class TestZlib:
    def test_goldens(self):
        for text, expected in ZLIB_GOLDENS.items():
            assert compressed_len(text) == expected

    def test_long_repetitive_text_compresses(self):
        n = compressed_len("a" * 1000)
        assert 8 < n < 1000

    def test_deterministic(self):
        text = "re travel 8412 call 215-330-1209 from omar to rosa"
        assert compressed_len(text) == compressed_len(text) == len(zlib.compress(text.encode()))

    def test_score_formula(self):
        text = "call me at 713-853-1234"
        s = stats_of([2.0, 2.0, 2.0])
        assert score_zlib_mia(s, text) == -2.0 / compressed_len(text)
        assert score_zlib_mia(s, text) == pytest.approx(-2.0 / 31)

    def test_monotone_at_fixed_length(self):
        text = "identical text"
        assert score_zlib_mia(stats_of([1.0]), text) > score_zlib_mia(stats_of([2.0]), text)

    def test_zero_loss_scores_zero(self):
        assert score_zlib_mia(stats_of([0.0]), "whatever") == 0.0


class TestMinK:
    def test_hand_example(self):
        s = stats_of([0.1, 0.5, 2.0, 3.0, 4.0])
        assert score_min_k(s, AttackConfig(min_k_percent=40)) == pytest.approx(-3.5, abs=1e-12)

    def test_full_selection_equals_loss_score(self):
        s = stats_of([0.3, 1.7, 0.9, 2.2])
        assert score_min_k(s, AttackConfig(min_k_percent=100)) == pytest.approx(
            score_loss_mia(s), abs=1e-12
        )

    def test_single_token_floor(self):
        s = stats_of([1.25])
        for k in (1, 20, 99):
            assert score_min_k(s, AttackConfig(min_k_percent=k)) == -1.25

    def test_default_k_is_twenty(self):
        assert AttackConfig().min_k_percent == 20.0

    def test_invalid_k_rejected(self):
        with pytest.raises(ValueError):
            AttackConfig(min_k_percent=0)
        with pytest.raises(ValueError):
            AttackConfig(min_k_percent=101)


def _population(n_forget=10, n_test=100, seed=0):
    rng = np.random.default_rng(seed)
    texts = [f"re x {rng.integers(1000, 9999)} call 713-{rng.integers(100,999)}-{rng.integers(1000,9999)}"
             for _ in range(n_forget + n_test)]
    samples = [Sample(f"s{i}", t) for i, t in enumerate(texts)]
    forget = Corpus(tuple(samples[:n_forget]))
    test = Corpus(tuple(samples[n_forget:]))
    both = Corpus(tuple(samples))
    vocab = build_vocab(both, "char", 512)
    model = tiny_model(vocab_size=vocab.size, seed=1)
    return model, vocab, forget, test


class TestScorePopulation:
    def test_cardinality_and_labels(self):
        model, vocab, forget, test = _population()
        pop = score_population(
            model, forget, test, encode_corpus(vocab, forget), encode_corpus(vocab, test), "loss"
        )
        assert len(pop.scores) == 110
        assert sum(s.is_member for s in pop.scores) == 10
        assert pop.excluded == []

    def test_deterministic(self):
        model, vocab, forget, test = _population()
        args = (model, forget, test, encode_corpus(vocab, forget), encode_corpus(vocab, test))
        a = score_population(*args, "min_k")
        b = score_population(*args, "min_k")
        assert a.scores == b.scores

    def test_all_scores_finite(self):
        model, vocab, forget, test = _population()
        for attack in ("loss", "zlib", "min_k"):
            pop = score_population(
                model, forget, test, encode_corpus(vocab, forget), encode_corpus(vocab, test), attack
            )
            assert all(math.isfinite(s.score) for s in pop.scores)

    def test_nonfinite_loss_excluded_with_report(self):
        model, vocab, forget, test = _population()
        # drive one vocabulary entry's logit to -inf so sequences containing it
        # get infinite NLL
        victim = vocab.token_id("7")
        model.params["out.b"][victim] = -np.inf
        pop = score_population(
            model, forget, test, encode_corpus(vocab, forget), encode_corpus(vocab, test), "loss"
        )
        assert pop.excluded  # every text here contains a 7xx area code
        assert len(pop.scores) + len(pop.excluded) == 110
        assert all(math.isfinite(s.score) for s in pop.scores)

    def test_min_k100_ranking_matches_loss(self):
        model, vocab, forget, test = _population(seed=5)
        args = (model, forget, test, encode_corpus(vocab, forget), encode_corpus(vocab, test))
        loss_auc = auc(score_population(*args, "loss").scores).auc
        mink_auc = auc(
            score_population(*args, "min_k", AttackConfig(min_k_percent=100)).scores
        ).auc
        assert abs(loss_auc - mink_auc) <= 1e-12
