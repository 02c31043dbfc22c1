"""
Shared commands:
- synth: deterministic synthetic corpus with lexical failure precursors
- split: outcome-stratified train / calibration / validation / test split file
"""

import logging
from dataclasses import replace
from typing import Any, Dict

from .artifacts import RunManifest
from .config import config_to_dict, load_config
from .file_parser import load_corpus, save_corpus, save_splits
from .trace_model import SynthConfig, generate_synthetic_corpus, make_splits


def cmd_synth(args) -> Dict[str, Any]:
    manifest = RunManifest(command="synth")
    manifest.record_inputs([args.config])
    config = load_config(SynthConfig, args.config) if args.config else SynthConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.count is not None:
        overrides["trajectory_count"] = args.count
    config = replace(config, **overrides)
    config.validate()

    corpus = generate_synthetic_corpus(config)
    save_corpus(args.out, corpus)
    failures = sum(1 for t in corpus if t.outcome == 0)

    manifest.config = config_to_dict(config)
    manifest.seed = config.seed
    manifest.finish([args.out])
    return {"out": args.out, "trajectories": len(corpus), "failures": failures, "seed": config.seed}


def cmd_split(args) -> Dict[str, Any]:
    manifest = RunManifest(command="split")
    manifest.record_inputs([args.corpus])
    corpus = load_corpus(args.corpus)
    splits = make_splits(corpus, args.train, args.validation, args.test, args.calibration, args.seed)
    save_splits(args.out, splits)

    manifest.config = {
        "train": args.train, "validation": args.validation, "test": args.test, "calibration": args.calibration,
    }
    manifest.seed = args.seed
    manifest.finish([args.out])
    logging.info("[Splits] Saved split file | out=%s", args.out)
    return {
        "out": args.out,
        "train": len(splits.train_ids),
        "calibration": len(splits.calibration_ids),
        "validation": len(splits.validation_ids),
        "test": len(splits.test_ids),
    }


def register(subparsers) -> None:
    p = subparsers.add_parser("synth", help="Generate a synthetic trajectory corpus")
    p.add_argument("--config", default=None, help="SynthConfig JSON")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    p.add_argument("--count", type=int, default=None, help="Override the trajectory count")
    p.add_argument("--out", required=True, help="Corpus (JSONL)")
    p.set_defaults(handler=cmd_synth)

    p = subparsers.add_parser("split", help="Build a role-tagged split file")
    p.add_argument("--corpus", required=True, help="Raw corpus (JSONL)")
    p.add_argument("--train", type=float, default=0.8)
    p.add_argument("--validation", type=float, default=0.1)
    p.add_argument("--test", type=float, default=0.1)
    p.add_argument("--calibration", type=float, default=0.1, help="Fraction of the training pool held out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="Split file (JSON)")
    p.set_defaults(handler=cmd_split)
