"""
StepView commands: convert, sample-pack
"""

import logging
from typing import Any, Dict

from common.artifacts import RunManifest, verify_artifact
from common.file_parser import load_corpus, write_json

from .adapter import (
    convert_corpus,
    default_synthetic_spec,
    load_adapter_spec,
    save_stepview_corpus,
    validate_adapter,
)
from .sample_pack import build_sample_pack


def cmd_convert(args) -> Dict[str, Any]:
    """Apply an adapter spec to a raw corpus and report coverage"""
    manifest = RunManifest(command="convert")
    manifest.record_inputs([args.corpus, args.adapter])
    spec = load_adapter_spec(args.adapter) if args.adapter else default_synthetic_spec()
    corpus = load_corpus(args.corpus)

    coverage = validate_adapter(spec, corpus)
    converted = convert_corpus(spec, corpus)
    count = save_stepview_corpus(args.out, converted)

    manifest.config = {"adapter": spec.to_dict()}
    manifest.extra = {"coverage": coverage}
    manifest.finish([args.out])
    logging.info("[StepView] Converted corpus | out=%s | trajectories=%s", args.out, count)
    return {"out": args.out, "trajectories": count, "coverage": coverage}


def cmd_sample_pack(args) -> Dict[str, Any]:
    verify_artifact(args.corpus)
    pack = build_sample_pack(load_corpus(args.corpus))
    payload = pack.to_dict()
    if args.out:
        manifest = RunManifest(command="sample-pack")
        manifest.record_inputs([args.corpus])
        write_json(args.out, payload)
        manifest.finish([args.out])
    return {"out": args.out, "bucket_counts": payload["bucket_counts"], "entries": len(pack.entries)}


def register(subparsers) -> None:
    p = subparsers.add_parser("convert", help="Convert a raw JSONL corpus into StepView records")
    p.add_argument("--corpus", required=True, help="Raw trajectory corpus (JSONL)")
    p.add_argument("--adapter", default=None, help="Adapter spec JSON (default: synthetic corpus spec)")
    p.add_argument("--out", required=True, help="Output StepView corpus (JSONL)")
    p.set_defaults(handler=cmd_convert)

    p = subparsers.add_parser("sample-pack", help="Build the 12-step raw sample pack for adapter induction")
    p.add_argument("--corpus", required=True, help="Raw training corpus (JSONL)")
    p.add_argument("--out", default=None, help="Where to write the pack (JSON)")
    p.set_defaults(handler=cmd_sample_pack)
