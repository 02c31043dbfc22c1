"""
Encoder command: fit-encoder
"""

import logging
from typing import Any, Dict

from common.artifacts import RunManifest
from common.config import load_config
from common.file_parser import load_splits
from common.trace_model import select
from app_stepview.adapter import load_stepview_corpus

from .vectorizer import MAIN_CONFIG, PROBE_CONFIG, EncoderConfig, fit_vectorizer, save_vectorizer


def cmd_fit_encoder(args) -> Dict[str, Any]:
    """Fit the step vectorizer on training-split StepView texts only"""
    manifest = RunManifest(command="fit-encoder")
    manifest.record_inputs([args.stepview, args.splits, args.config])
    if args.config:
        config = load_config(EncoderConfig, args.config)
    else:
        config = PROBE_CONFIG if args.probe else MAIN_CONFIG

    splits = load_splits(args.splits)
    train = select(load_stepview_corpus(args.stepview), splits.train_ids)
    texts = [text for t in train for text in t.texts(exclude=config.excluded_fields)]
    model = fit_vectorizer(texts, config)
    save_vectorizer(args.out, model)

    manifest.config = config.to_dict()
    manifest.seed = splits.seed
    manifest.extra = {"vectorizer_hash": model.hash, "features": model.dimension}
    manifest.finish([args.out])
    logging.info("[Encoder] Saved vectorizer | out=%s | features=%s", args.out, model.dimension)
    return {"out": args.out, "features": model.dimension, "documents": model.n_documents, "hash": model.hash}


def register(subparsers) -> None:
    p = subparsers.add_parser("fit-encoder", help="Fit the TF-IDF step encoder on the train split")
    p.add_argument("--stepview", required=True, help="StepView corpus (JSONL)")
    p.add_argument("--splits", required=True, help="Split file (JSON)")
    p.add_argument("--config", default=None, help="EncoderConfig JSON")
    p.add_argument("--probe", action="store_true", help="Use the probe configuration (min_df 2, sublinear tf, cap 50000)")
    p.add_argument("--out", required=True, help="Vectorizer artifact (JSON)")
    p.set_defaults(handler=cmd_fit_encoder)
