"""Declarative run configuration.

A run is described by one JSON document; every hyperparameter defaults to the
protocol's reference settings (seed 42, 1% forget fraction, AdamW at 1e-5
with batch 32 for 5 epochs, noise scale 5e-4 with clip norm 1, k = 3,
combined-objective beta 0.999, distillation weights 0.999/1/0.01, K = 20,
10 complexity units), so an empty override section reproduces them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import jsonschema

from .attack import ATTACKS
from .errors import ConfigError
from .unlearn import METHODS

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["corpus"],
    "properties": {
        "corpus": {"type": "string"},
        "pii_pattern": {"type": "string"},
        "tokenizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["char", "whitespace"]},
                "vocab_size": {"type": "integer", "minimum": 1},
                "max_len": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "embed_dim": {"type": "integer", "minimum": 1},
                "context_window": {"type": "integer", "minimum": 1},
                "hidden_blocks": {"type": "integer", "minimum": 1},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "init_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 0},
                "optimizer": {"enum": ["adamw", "sgd"]},
                "weight_decay": {"type": "number", "minimum": 0},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "eps": {"type": "number"},
            },
        },
        "dp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "noise_scale": {"type": "number", "minimum": 0},
                "clip_norm": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "unlearn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["adamw", "sgd"]},
                "k": {"type": "integer", "minimum": 1},
                "neggrad_beta": {"type": "number"},
                "scrub_alpha": {"type": "number", "minimum": 0},
                "scrub_beta": {"type": "number", "minimum": 0},
                "scrub_gamma": {"type": "number", "minimum": 0},
                "max_units": {"type": "number", "minimum": 1},
                "max_epochs": {"type": ["integer", "null"], "minimum": 1},
                "overrides": {"type": "object"},
            },
        },
        "forget_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "test_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}},
        "attacks": {"type": "array", "items": {"enum": list(ATTACKS)}},
        "min_k_percent": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
        "master_seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS: dict[str, Any] = {
    "pii_pattern": "phone_us",
    "tokenizer": {"mode": "char", "vocab_size": 512, "max_len": 64},
    "model": {
        "embed_dim": 12,
        "context_window": 8,
        "hidden_blocks": 2,
        "hidden_dim": 48,
        "init_scale": 0.1,
    },
    "train": {
        "learning_rate": 1e-5,
        "batch_size": 32,
        "epochs": 5,
        "optimizer": "adamw",
        "weight_decay": 0.0,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "dp": {"noise_scale": 5e-4, "clip_norm": 1.0},
    "unlearn": {
        "learning_rate": 1e-5,
        "batch_size": 32,
        "optimizer": "adamw",
        "k": 3,
        "neggrad_beta": 0.999,
        "scrub_alpha": 0.999,
        "scrub_beta": 1.0,
        "scrub_gamma": 0.01,
        "max_units": 10,
        "max_epochs": None,
        "overrides": {},
    },
    "forget_frac": 0.01,
    "test_frac": 0.5,
    "methods": list(METHODS),
    "attacks": list(ATTACKS),
    "min_k_percent": 20.0,
    "master_seed": 42,
    "out_dir": "runs/out",
    "workers": 1,
}


@dataclass
class RunConfig:
    """Resolved run configuration (defaults merged in)."""

    corpus: str
    pii_pattern: str
    tokenizer: dict
    model: dict
    train: dict
    dp: dict
    unlearn: dict
    forget_frac: float
    test_frac: float
    methods: list[str]
    attacks: list[str]
    min_k_percent: float
    master_seed: int
    out_dir: str
    workers: int

    def to_dict(self) -> dict:
        return copy.deepcopy(self.__dict__)

    def replace(self, **top_level) -> "RunConfig":
        d = self.to_dict()
        d.update(top_level)
        return RunConfig(**d)


def _merge(defaults: Any, given: Any) -> Any:
    if isinstance(defaults, dict) and isinstance(given, dict):
        out = dict(defaults)
        for k, v in given.items():
            out[k] = _merge(defaults.get(k), v)
        return out
    return copy.deepcopy(given)


def config_from_dict(raw: dict) -> RunConfig:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message} (at {'/'.join(map(str, exc.path))})")
    merged = _merge(DEFAULTS, raw)
    for method, override in merged["unlearn"]["overrides"].items():
        if method not in METHODS:
            raise ConfigError(f"unlearn override for unknown method {method!r}")
        if not isinstance(override, dict):
            raise ConfigError(f"unlearn override for {method!r} must be an object")
    return RunConfig(**merged)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return config_from_dict(raw)
