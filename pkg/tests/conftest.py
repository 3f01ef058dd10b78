import json

import numpy as np
import pytest

from unlearn_audit.config import config_from_dict
from unlearn_audit.corpus import save_corpus
from unlearn_audit.model import ModelConfig, init_model
from unlearn_audit.synth import synth_corpus


@pytest.fixture(scope="session")
def desk_corpus_path(tmp_path_factory):
    """The bundled 2000-sample skewed-phone corpus the acceptance suite runs on."""
    path = tmp_path_factory.mktemp("desk") / "desk_corpus.jsonl"
    save_corpus(synth_corpus(2000, 1.6, "phone_us", seed=7, pii_frac=1.0, n_groups=30), path)
    return path


def desk_config(corpus_path, out_dir, master_seed=42, **overrides):
    raw = {
        "corpus": str(corpus_path),
        "tokenizer": {"max_len": 72},
        "model": {"embed_dim": 16, "context_window": 12, "hidden_blocks": 2, "hidden_dim": 64},
        "train": {"learning_rate": 3e-3, "epochs": 5},
        "unlearn": {"learning_rate": 3e-3},
        "forget_frac": 0.03,
        "master_seed": master_seed,
        "out_dir": str(out_dir),
    }
    raw.update(overrides)
    return config_from_dict(raw)


@pytest.fixture(scope="session")
def small_corpus_path(tmp_path_factory):
    """A 400-sample corpus (with some PII-free texts) for fast pipeline tests."""
    path = tmp_path_factory.mktemp("small") / "small_corpus.jsonl"
    save_corpus(synth_corpus(400, 1.4, "phone_us", seed=3), path)
    return path


def small_config(corpus_path, out_dir, **overrides):
    raw = {
        "corpus": str(corpus_path),
        "tokenizer": {"max_len": 48},
        "model": {"embed_dim": 8, "context_window": 6, "hidden_blocks": 2, "hidden_dim": 24},
        "train": {"learning_rate": 2e-3, "epochs": 2},
        "unlearn": {"learning_rate": 2e-3},
        "forget_frac": 0.02,
        "master_seed": 42,
        "out_dir": str(out_dir),
    }
    raw.update(overrides)
    return config_from_dict(raw)


def tiny_model(vocab_size=11, blocks=2, seed=1, **kw):
    cfg = ModelConfig(
        vocab_size=vocab_size,
        embed_dim=kw.pop("embed_dim", 4),
        context_window=kw.pop("context_window", 3),
        hidden_blocks=blocks,
        hidden_dim=kw.pop("hidden_dim", 6),
        init_scale=kw.pop("init_scale", 0.5),
        init_seed=seed,
    )
    return init_model(cfg)


def random_batch(vocab_size=11, lengths=(5, 3, 8, 4), seed=7):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab_size, size=n) for n in lengths]


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path
