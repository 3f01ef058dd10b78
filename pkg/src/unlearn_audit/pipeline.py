"""End-to-end experiment orchestration.

One run executes: ingest and annotate the corpus, split off the held-out test
pool, build the three forget/keep scenarios, train the base and retrain
models (plus noisy variants when the DP-SGD method is requested), apply every
requested unlearning method to every scenario under the complexity budget,
score all membership attacks against the test pool, and emit the
minority-aware report.

Trained models are cached by (corpus digest, training config, initial-model
hash), so the random and minority scenarios share one learned model and the
random and canary scenarios share one retrain baseline, and sweeps do not
retrain needlessly. Every random stream is derived from the master seed plus
a task path, making runs bit-reproducible regardless of worker count. A
failing method is recorded in the manifest and does not abort the others.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from .attack import AttackConfig, ScoredPopulation, score_population
from .config import RunConfig
from .corpus import (
    Corpus,
    build_histogram,
    build_vocab,
    encode_corpus,
    export_histogram,
    get_pattern,
    annotate_pii,
    load_corpus,
)
from .errors import AuditError, ConfigError
from .metrics import (
    MinorityAwareSummary,
    PrivLeakRecord,
    SCENARIOS,
    aggregate,
    auc,
    privleak,
)
from .model import (
    DpSgdConfig,
    ModelConfig,
    ModelState,
    TrainConfig,
    init_model,
    model_hash,
    perplexity,
    save_model,
    train,
)
from .partition import ScenarioSet, build_scenarios, save_scenarios
from .rng import derive_int_seed, derive_rng
from .unlearn import UnlearnConfig, UnlearnOutcome, run_unlearn

log = logging.getLogger(__name__)

OUT_DIR_ENV = "UNLEARN_AUDIT_OUT"
STAGES = ("ingest", "scenarios", "train", "unlearn", "attack", "report")

REPORT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "records", "summary"],
    "properties": {
        "schema_version": {"const": 1},
        "least_frequent_group": {"type": "string"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["method", "attack", "scenario", "auc_unlearn", "auc_retrain", "pl", "perplexity"],
                "properties": {
                    "method": {"type": "string"},
                    "attack": {"type": "string"},
                    "scenario": {"type": "string"},
                    "auc_unlearn": {"type": "number"},
                    "auc_retrain": {"type": "number"},
                    "pl": {"type": "number"},
                    "perplexity": {"type": "number"},
                },
            },
        },
        "summary": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["method", "attack", "worst_pl", "worst_scenario", "worst_perplexity", "underestimated"],
                "properties": {
                    "method": {"type": "string"},
                    "attack": {"type": "string"},
                    "pl_random": {"type": "number"},
                    "pl_canary": {"type": "number"},
                    "pl_minority": {"type": "number"},
                    "worst_pl": {"type": "number"},
                    "worst_scenario": {"type": "string"},
                    "excess_ratio_canary": {"type": ["number", "null"]},
                    "excess_ratio_minority": {"type": ["number", "null"]},
                    "worst_perplexity": {"type": "number"},
                    "underestimated": {"type": "boolean"},
                },
            },
        },
    },
}


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for s in corpus:
        h.update(s.id.encode())
        h.update(b"\x00")
        h.update(s.text.encode())
        h.update(b"\x01")
    return h.hexdigest()


class ModelCache:
    """In-memory store of trained models keyed by their full provenance."""

    def __init__(self):
        self._models: dict[str, ModelState] = {}
        self.hits = 0
        self.misses = 0

    def get_or_train(self, key: str, builder) -> ModelState:
        if key not in self._models:
            self.misses += 1
            self._models[key] = builder()
        else:
            self.hits += 1
        return self._models[key]


@dataclass
class RunManifest:
    config: dict
    out_dir: str
    stage_seconds: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, dict] = field(default_factory=dict)
    ledgers: dict[str, dict] = field(default_factory=dict)
    selected_epochs: dict[str, int] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    report_paths: dict[str, str] = field(default_factory=dict)
    scenario_path: Optional[str] = None
    histogram_path: Optional[str] = None
    cache_stats: dict = field(default_factory=dict)

    def record_checkpoint(self, role: str, model: ModelState, path: Optional[Path]) -> None:
        self.checkpoints[role] = {
            "path": str(path) if path else None,
            "hash": model_hash(model),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True, default=str)


@dataclass
class ScenarioBundle:
    """Everything one scenario contributes to unlearning and attacks."""

    name: str
    train_corpus: Corpus
    forget: Corpus
    keep: Corpus
    train_seqs: list
    forget_seqs: list
    keep_seqs: list
    learn: Optional[ModelState] = None
    retrain: Optional[ModelState] = None
    baseline_ppl: float = 0.0
    noisy_learn: Optional[ModelState] = None
    noisy_retrain: Optional[ModelState] = None
    noisy_baseline_ppl: Optional[float] = None


def resolve_out_dir(config: RunConfig, cli_out: Optional[str] = None) -> Path:
    """CLI flag beats the environment variable beats the config value."""
    out = cli_out or os.environ.get(OUT_DIR_ENV) or config.out_dir
    return Path(out)


def _train_config(config: RunConfig, shuffle_seed: int) -> TrainConfig:
    return TrainConfig(**config.train, shuffle_seed=shuffle_seed)


def _unlearn_config(config: RunConfig, method: str, scenario: str) -> UnlearnConfig:
    base = dict(config.unlearn)
    overrides = base.pop("overrides", {})
    merged = {**base, **overrides.get(method, {})}
    master = config.master_seed
    dp = DpSgdConfig(
        noise_scale=config.dp["noise_scale"],
        clip_norm=config.dp["clip_norm"],
        noise_seed=derive_int_seed(master, "unlearn-noise", method, scenario),
    )
    return UnlearnConfig(
        method=method,
        dp=dp,
        seed=derive_int_seed(master, "unlearn", method, scenario),
        **merged,
    )


class Runner:
    """Stage-by-stage execution of one configured run."""

    def __init__(self, config: RunConfig, cache: Optional[ModelCache] = None,
                 out_dir: Optional[str] = None):
        self.config = config
        self.cache = cache if cache is not None else ModelCache()
        self.out = resolve_out_dir(config, out_dir)
        self.manifest = RunManifest(config=config.to_dict(), out_dir=str(self.out))
        self.records: list[PrivLeakRecord] = []
        self.summary: Optional[MinorityAwareSummary] = None
        self.outcomes: dict[tuple[str, str], UnlearnOutcome] = {}
        self.bundles: dict[str, ScenarioBundle] = {}

    # -- stage: ingest ------------------------------------------------------

    def ingest(self) -> None:
        cfg = self.config
        self.pattern = get_pattern(cfg.pii_pattern)
        corpus = annotate_pii(load_corpus(cfg.corpus), self.pattern)
        rng = derive_rng(cfg.master_seed, "split")
        n_test = int(round(len(corpus) * cfg.test_frac))
        test_idx = set(rng.choice(len(corpus), size=n_test, replace=False).tolist())
        self.train_pool = Corpus(tuple(s for i, s in enumerate(corpus) if i not in test_idx))
        self.test_pool = Corpus(tuple(s for i, s in enumerate(corpus) if i in test_idx))
        if len(self.train_pool) == 0 or len(self.test_pool) == 0:
            raise ConfigError("test_frac leaves an empty train or test pool")
        tok = cfg.tokenizer
        self.vocab = build_vocab(self.train_pool, tok["mode"], tok["vocab_size"])
        self.max_len = tok["max_len"]
        self.test_seqs = encode_corpus(self.vocab, self.test_pool, self.max_len)
        self.histogram = build_histogram(self.train_pool)

    # -- stage: scenarios ---------------------------------------------------

    def scenarios(self) -> None:
        cfg = self.config
        self.scenario_set: ScenarioSet = build_scenarios(
            self.train_pool, cfg.forget_frac, derive_int_seed(cfg.master_seed, "scenarios"),
            self.pattern,
        )
        self.out.mkdir(parents=True, exist_ok=True)
        scen_path = self.out / "scenarios.json"
        save_scenarios(self.scenario_set, scen_path)
        self.manifest.scenario_path = str(scen_path)
        hist_path = self.out / "histogram.json"
        export_histogram(self.histogram, hist_path)
        self.manifest.histogram_path = str(hist_path)

        sc = self.scenario_set
        enc = lambda corpus: encode_corpus(self.vocab, corpus, self.max_len)

        def bundle(name: str, train_corpus: Corpus, forget_ids, keep_ids) -> ScenarioBundle:
            forget = train_corpus.subset(forget_ids)
            keep = train_corpus.subset(keep_ids)
            return ScenarioBundle(
                name=name,
                train_corpus=train_corpus,
                forget=forget,
                keep=keep,
                train_seqs=enc(train_corpus),
                forget_seqs=enc(forget),
                keep_seqs=enc(keep),
            )

        self.bundles = {
            "random": bundle("random", self.train_pool, sc.random.forget, sc.random.keep),
            "canary": bundle("canary", sc.canary_train, sc.canary_forget, sc.random.keep),
            "minority": bundle("minority", self.train_pool, sc.minority.forget, sc.minority.keep),
        }

    # -- stage: train -------------------------------------------------------

    def _trained(self, corpus: Corpus, seqs, noisy: bool, role: str) -> ModelState:
        cfg = self.config
        digest = corpus_digest(corpus)
        variant = "dp" if noisy else "plain"
        shuffle_seed = derive_int_seed(cfg.master_seed, "train", variant, digest)
        train_cfg = _train_config(cfg, shuffle_seed)
        dp = None
        if noisy:
            dp = DpSgdConfig(
                noise_scale=cfg.dp["noise_scale"],
                clip_norm=cfg.dp["clip_norm"],
                noise_seed=derive_int_seed(cfg.master_seed, "train-noise", digest),
            )
        key = json.dumps(
            {
                "corpus": digest,
                "train": train_cfg.__dict__,
                "dp": dp.__dict__ if dp else None,
                "m0": model_hash(self.m0),
            },
            sort_keys=True,
        )
        model = self.cache.get_or_train(key, lambda: train(self.m0, seqs, train_cfg, dp))
        ckpt_dir = self.out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = ckpt_dir / f"{role}.npz"
        save_model(model, path)
        self.manifest.record_checkpoint(role, model, path)
        return model

    def train_models(self) -> None:
        cfg = self.config
        model_cfg = ModelConfig(
            vocab_size=self.vocab.size,
            init_seed=derive_int_seed(cfg.master_seed, "init"),
            **cfg.model,
        )
        self.m0 = init_model(model_cfg)
        need_noisy = "langevin" in cfg.methods
        for name, b in self.bundles.items():
            b.learn = self._trained(b.train_corpus, b.train_seqs, False, f"learn_{name}")
            b.baseline_ppl = perplexity(b.learn, b.train_seqs)
            if need_noisy:
                b.noisy_learn = self._trained(b.train_corpus, b.train_seqs, True, f"noisy_learn_{name}")
                b.noisy_baseline_ppl = perplexity(b.noisy_learn, b.train_seqs)
        for name, b in self.bundles.items():
            b.retrain = self._trained(b.keep, b.keep_seqs, False, f"retrain_{name}")
            if need_noisy:
                b.noisy_retrain = self._trained(b.keep, b.keep_seqs, True, f"noisy_retrain_{name}")

    # -- stage: unlearn -----------------------------------------------------

    def _unlearn_task(self, method: str, scenario: str) -> tuple[tuple[str, str], UnlearnOutcome]:
        b = self.bundles[scenario]
        ucfg = _unlearn_config(self.config, method, scenario)
        if method == "langevin":
            m_learn, baseline = b.noisy_learn, b.noisy_baseline_ppl
        else:
            m_learn, baseline = b.learn, b.baseline_ppl
        outcome = run_unlearn(m_learn, b.forget_seqs, b.keep_seqs, ucfg, b.train_seqs, baseline)
        return (method, scenario), outcome

    def unlearn(self) -> None:
        tasks = [(m, s) for m in self.config.methods for s in SCENARIOS]
        results: dict[tuple[str, str], UnlearnOutcome] = {}
        errors: dict[tuple[str, str], str] = {}

        def safe(task):
            try:
                return task, self._unlearn_task(*task)[1], None
            except Exception as exc:  # failure isolation per method
                return task, None, f"{type(exc).__name__}: {exc}"

        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                done = list(pool.map(safe, tasks))
        else:
            done = [safe(t) for t in tasks]
        for task, outcome, err in done:
            if err is not None:
                errors[task] = err
            else:
                results[task] = outcome

        ckpt_dir = self.out / "checkpoints" / "unlearn"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for (method, scenario) in sorted(results):
            outcome = results[(method, scenario)]
            tag = f"{method}/{scenario}"
            for epoch, state in enumerate(outcome.checkpoints, start=1):
                save_model(state, ckpt_dir / f"{method}_{scenario}_epoch{epoch}.npz")
            self.manifest.record_checkpoint(
                f"unlearn_{method}_{scenario}_selected", outcome.selected, None
            )
            self.manifest.ledgers[tag] = outcome.ledger.to_json()
            self.manifest.selected_epochs[tag] = outcome.selected_epoch
            if outcome.diverged:
                self.manifest.warnings.append(
                    f"{tag}: aborted at a non-finite step, kept epoch {outcome.selected_epoch} ({outcome.diverged})"
                )
        for task, err in sorted(errors.items()):
            self.manifest.errors["/".join(task)] = err
            log.error("unlearn task %s failed: %s", task, err)
        self.outcomes = results

    # -- stage: attack ------------------------------------------------------

    def _dump_scores(self, name: str, pop: ScoredPopulation) -> None:
        path = self.out / "scores"
        path.mkdir(parents=True, exist_ok=True)
        with open(path / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "attack", "score", "is_member"])
            for s in pop.scores:
                w.writerow([s.sample_id, s.attack, repr(s.score), int(s.is_member)])

    def attack(self) -> None:
        cfg = self.config
        atk_cfg = AttackConfig(min_k_percent=cfg.min_k_percent)
        retrain_auc: dict[tuple[str, str, bool], float] = {}

        def retrain_auc_for(scenario: str, attack: str, noisy: bool) -> float:
            key = (scenario, attack, noisy)
            if key not in retrain_auc:
                b = self.bundles[scenario]
                model = b.noisy_retrain if noisy else b.retrain
                pop = score_population(
                    model, b.forget, self.test_pool, b.forget_seqs, self.test_seqs, attack, atk_cfg
                )
                self._note_exclusions(f"retrain_{'noisy_' if noisy else ''}{scenario}_{attack}", pop)
                self._dump_scores(f"retrain_{'noisy_' if noisy else ''}{scenario}_{attack}", pop)
                retrain_auc[key] = auc(pop.scores).auc
            return retrain_auc[key]

        methods = ["no_unlearn"] + [m for m in cfg.methods]
        for method in methods:
            for scenario in SCENARIOS:
                b = self.bundles[scenario]
                if method == "no_unlearn":
                    selected = b.learn
                elif (method, scenario) in self.outcomes:
                    selected = self.outcomes[(method, scenario)].selected
                else:
                    continue  # failed task; recorded in manifest.errors
                noisy = method == "langevin"
                ppl = perplexity(selected, self.test_seqs)
                for attack in cfg.attacks:
                    pop = score_population(
                        selected, b.forget, self.test_pool, b.forget_seqs, self.test_seqs,
                        attack, atk_cfg,
                    )
                    self._note_exclusions(f"{method}_{scenario}_{attack}", pop)
                    self._dump_scores(f"{method}_{scenario}_{attack}", pop)
                    auc_u = auc(pop.scores).auc
                    auc_r = retrain_auc_for(scenario, attack, noisy)
                    self.records.append(
                        PrivLeakRecord(
                            method=method,
                            attack=attack,
                            scenario=scenario,
                            auc_unlearn=auc_u,
                            auc_retrain=auc_r,
                            pl=privleak(auc_u, auc_r),
                            perplexity=ppl,
                        )
                    )

    def _note_exclusions(self, tag: str, pop: ScoredPopulation) -> None:
        if pop.excluded:
            self.manifest.warnings.append(
                f"{tag}: excluded {len(pop.excluded)} samples with non-finite loss: "
                + ",".join(pop.excluded[:5])
            )

    # -- stage: report ------------------------------------------------------

    def report(self) -> None:
        complete: list[PrivLeakRecord] = []
        by_cell: dict[tuple[str, str], set[str]] = {}
        for r in self.records:
            by_cell.setdefault((r.method, r.attack), set()).add(r.scenario)
        incomplete = sorted(c for c, seen in by_cell.items() if seen < set(SCENARIOS))
        for method, attack in incomplete:
            self.manifest.warnings.append(f"summary skips {method}/{attack}: missing scenarios")
        for r in self.records:
            if by_cell[(r.method, r.attack)] >= set(SCENARIOS):
                complete.append(r)
        self.summary = aggregate(complete) if complete else MinorityAwareSummary(entries=())
        paths = emit_report(
            self.records, self.summary, self.out,
            least_frequent_group=self.scenario_set.least_frequent_group,
        )
        self.manifest.report_paths = {k: str(v) for k, v in paths.items()}

    # -- driver --------------------------------------------------------------

    def run(self, until: str = "report") -> RunManifest:
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}; stages: {STAGES}")
        stage_fns = {
            "ingest": self.ingest,
            "scenarios": self.scenarios,
            "train": self.train_models,
            "unlearn": self.unlearn,
            "attack": self.attack,
            "report": self.report,
        }
        for stage in STAGES:
            started = time.perf_counter()
            stage_fns[stage]()
            self.manifest.stage_seconds[stage] = round(time.perf_counter() - started, 3)
            if stage == until:
                break
        self.manifest.cache_stats = {"hits": self.cache.hits, "misses": self.cache.misses}
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest.save(self.out / "manifest.json")
        return self.manifest


def run(config: RunConfig, cache: Optional[ModelCache] = None,
        out_dir: Optional[str] = None, until: str = "report") -> RunManifest:
    return Runner(config, cache=cache, out_dir=out_dir).run(until=until)


# ---------------------------------------------------------------------------
# Reports


def _summary_rows(summary: MinorityAwareSummary) -> list[dict]:
    rows = []
    for e in summary.entries:
        rows.append(
            {
                "method": e.method,
                "attack": e.attack,
                "pl_random": e.pl_by_scenario["random"],
                "pl_canary": e.pl_by_scenario["canary"],
                "pl_minority": e.pl_by_scenario["minority"],
                "worst_pl": e.worst_pl,
                "worst_scenario": e.worst_scenario,
                "excess_ratio_canary": e.excess_ratio_canary,
                "excess_ratio_minority": e.excess_ratio_minority,
                "worst_perplexity": e.worst_perplexity,
                "underestimated": e.underestimated,
            }
        )
    rows.sort(key=lambda r: (r["method"], r["attack"]))
    return rows


def report_as_dict(records, summary, least_frequent_group: str = "") -> dict:
    recs = [
        {
            "method": r.method,
            "attack": r.attack,
            "scenario": r.scenario,
            "auc_unlearn": r.auc_unlearn,
            "auc_retrain": r.auc_retrain,
            "pl": r.pl,
            "perplexity": r.perplexity,
        }
        for r in sorted(records, key=lambda r: (r.method, r.attack, SCENARIOS.index(r.scenario)))
    ]
    return {
        "schema_version": 1,
        "least_frequent_group": least_frequent_group,
        "records": recs,
        "summary": _summary_rows(summary),
    }


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def emit_report(records, summary, out_dir, formats=("json", "csv", "plotdata"),
                least_frequent_group: str = "") -> dict[str, Path]:
    """Write the report in the requested formats with stable field ordering."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    doc = report_as_dict(records, summary, least_frequent_group)
    validate_report(doc)
    if "json" in formats:
        p = out_dir / "report.json"
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths["json"] = p
    if "csv" in formats:
        p = out_dir / "report.csv"
        cols = [
            "method", "attack", "pl_random", "pl_canary", "excess_ratio_canary",
            "pl_minority", "excess_ratio_minority", "worst_pl", "worst_scenario",
            "worst_perplexity", "underestimated",
        ]
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in _summary_rows(summary):
                w.writerow([row[c] if c in row else "" for c in cols])
        paths["csv"] = p
    if "plotdata" in formats:
        p = out_dir / "plot_summary.txt"
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("# method attack worst_pl worst_perplexity\n")
            for row in _summary_rows(summary):
                fh.write(f"{row['method']} {row['attack']} {row['worst_pl']!r} {row['worst_perplexity']!r}\n")
        paths["plotdata"] = p
    return paths


# ---------------------------------------------------------------------------
# Sweeps

SWEEP_AXES = ("unlearn_epochs", "forget_frac", "noise_scale", "max_units")


def _apply_axis(config: RunConfig, axis: str, value) -> RunConfig:
    if axis == "forget_frac":
        return config.replace(forget_frac=float(value))
    if axis == "noise_scale":
        dp = dict(config.dp)
        dp["noise_scale"] = float(value)
        return config.replace(dp=dp)
    if axis == "unlearn_epochs":
        un = dict(config.unlearn)
        un["max_epochs"] = int(value)
        return config.replace(unlearn=un)
    if axis == "max_units":
        un = dict(config.unlearn)
        un["max_units"] = float(value)
        return config.replace(unlearn=un)
    raise ConfigError(f"unknown sweep axis {axis!r}; axes: {SWEEP_AXES}")


def sweep(config: RunConfig, axis: str, values, out_dir: Optional[str] = None) -> list[RunManifest]:
    """One run per axis value, sharing trained base models where possible."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    base_out = resolve_out_dir(config, out_dir)
    cache = ModelCache()
    manifests = []
    runners = []
    for value in values:
        sub = _apply_axis(config, axis, value)
        sub_out = base_out / f"sweep_{axis}" / str(value)
        runner = Runner(sub, cache=cache, out_dir=str(sub_out))
        manifests.append(runner.run())
        runners.append((value, runner))
    for attack in config.attacks:
        p = base_out / f"plot_{axis}_{attack}.txt"
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(f"# {axis} method worst_pl worst_perplexity\n")
            for value, runner in runners:
                for e in runner.summary.entries:
                    if e.attack != attack:
                        continue
                    fh.write(f"{value} {e.method} {e.worst_pl!r} {e.worst_perplexity!r}\n")
    return manifests
