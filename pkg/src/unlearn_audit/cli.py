"""Command-line entry point.

Subcommands mirror the pipeline stages: ``synth`` generates a skewed corpus,
``ingest``/``partition``/``train``/``unlearn``/``attack`` run the pipeline up
to the named stage, ``run`` executes everything and writes the report,
``report`` is an alias of ``run``, and ``sweep`` repeats runs along one
ablation axis. Exit status is 0 only when the requested stage completed; on a
fatal error the failing stage is named on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import RunConfig, load_config
from .corpus import save_corpus
from .errors import AuditError
from .synth import PII_KINDS, synth_corpus


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--methods", default=None, help="comma-separated unlearning methods")
    p.add_argument("--attacks", default=None, help="comma-separated attacks")
    p.add_argument("--workers", type=int, default=None, help="parallel unlearning tasks")


def _load(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(master_seed=args.seed)
    if args.methods is not None:
        config = config.replace(methods=[m for m in args.methods.split(",") if m])
    if args.attacks is not None:
        config = config.replace(attacks=[a for a in args.attacks.split(",") if a])
    if args.workers is not None:
        config = config.replace(workers=args.workers)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearn-audit",
        description="Minority-aware privacy-leakage evaluation of unlearning methods.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic skewed-PII corpus")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--zipf", type=float, default=1.3)
    p.add_argument("--pii-kind", choices=PII_KINDS, default="phone_us")
    p.add_argument("--seed", type=int, default=42)

    stage_of = {
        "ingest": "ingest",
        "partition": "scenarios",
        "train": "train",
        "unlearn": "unlearn",
        "attack": "attack",
        "run": "report",
        "report": "report",
    }
    for name, stage in stage_of.items():
        p = sub.add_parser(name, help=f"execute the pipeline through the {stage} stage")
        _add_common(p)
        p.set_defaults(stage=stage)

    p = sub.add_parser("sweep", help="repeat runs along one ablation axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        corpus = synth_corpus(args.n, args.zipf, args.pii_kind, args.seed)
        save_corpus(corpus, args.out)
        print(f"wrote {len(corpus)} samples to {args.out}")
        return 0

    stage = "config"
    try:
        config = _load(args)
        if args.command == "sweep":
            stage = "sweep"
            values = [json.loads(v) for v in args.values.split(",")]
            manifests = pipeline.sweep(config, args.axis, values, out_dir=args.out)
            print(f"sweep over {args.axis} complete: {len(manifests)} runs")
            return 0
        stage = args.stage
        manifest = pipeline.run(config, out_dir=args.out, until=args.stage)
        if manifest.errors:
            for task, err in manifest.errors.items():
                print(f"warning: {task}: {err}", file=sys.stderr)
        if args.stage == "report":
            print(f"report: {manifest.report_paths.get('json')}")
        else:
            print(f"completed stage {args.stage}; manifest: {manifest.out_dir}/manifest.json")
        return 0
    except AuditError as exc:
        print(f"error in stage {stage}: [{exc.code}] {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failure path
        print(f"error in stage {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
