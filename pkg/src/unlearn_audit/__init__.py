"""Minority-aware privacy-leakage evaluation harness for machine unlearning.

The package trains a tiny causal language model on a PII-bearing corpus,
constructs Random / Canary / Minority forget scenarios, applies a suite of
budget-capped unlearning methods, attacks the results with three membership
inference attacks, and reports the normalized leakage metric with its
minority-aware aggregation.
"""

from .attack import AttackConfig, AttackScore, compressed_len, score_loss_mia, score_min_k, score_population, score_zlib_mia
from .config import RunConfig, config_from_dict, load_config
from .corpus import (
    Corpus,
    PiiHistogram,
    PiiPattern,
    PiiSpan,
    Sample,
    Vocab,
    annotate_pii,
    build_histogram,
    build_vocab,
    decode,
    encode,
    least_frequent,
    load_corpus,
)
from .metrics import AucResult, MinorityAwareSummary, PrivLeakRecord, aggregate, auc, excess_ratio, privleak
from .model import (
    DpSgdConfig,
    LossStats,
    ModelConfig,
    ModelState,
    TrainConfig,
    adamw_step,
    backward,
    dpsgd_step,
    forward_loss,
    init_model,
    layer_mask,
    load_model,
    model_hash,
    perplexity,
    reinit_layers,
    save_model,
    train,
)
from .partition import Partition, ScenarioSet, build_scenarios, make_canaries, select_minority, split_random
from .pipeline import ModelCache, RunManifest, emit_report, run, sweep
from .synth import synth_corpus
from .unlearn import (
    ComplexityLedger,
    UnlearnConfig,
    UnlearnOutcome,
    kl_teacher_student,
    run_unlearn,
    select_checkpoint,
)

__version__ = "0.1.0"
