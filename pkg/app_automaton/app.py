"""
Automaton commands: extract-dfa, audit
"""

import logging
from typing import Any, Dict, List, Sequence

from common.artifacts import RunManifest, sha256_path
from common.errors import RejectedInputError
from common.file_parser import load_splits, write_json
from common.metrics import ScoredPrefixSet, TrajectoryScores, metrics_report
from common.trace_model import select, warning_labels
from app_encoder.vectorizer import encode_corpus
from app_monitor.app import check_role, load_model_dir
from app_monitor.model import hard_symbolize
from app_stepview.adapter import load_stepview_corpus

from .dfa import (
    FALLBACK_POLICIES,
    MIN_COUNT,
    DfaScores,
    audit_dfa,
    calibrate_state_risks,
    dfa_score_prefix,
    load_dfa,
    save_dfa,
    warning_threshold,
)
from .routed import RoutedSequence, induce_routed_dfa, route_value
from .rpni import induce_dfa


def symbolize_split(model, vectorizer, corpus, splits, role: str, route_key: str = "") -> List[RoutedSequence]:
    """Hard symbol sequences of one split, tagged with their route when a route key is given"""
    trajectories = select(corpus, splits.ids(role))
    encoded = encode_corpus(vectorizer, trajectories)
    return [
        RoutedSequence(
            trajectory_id=e.trajectory_id,
            route=route_value(t, route_key) if route_key else "",
            symbols=hard_symbolize(model, e),
            outcome=e.outcome,
        )
        for t, e in zip(trajectories, encoded)
    ]


def prefix_metrics(scored: Sequence[DfaScores], items: Sequence[RoutedSequence], horizon: int) -> Dict[str, Any]:
    """Pooled metrics over trusted prefixes, abstentions counted apart"""
    series = [TrajectoryScores(it.trajectory_id, it.outcome, s.risks) for s, it in zip(scored, items)]
    labels = {it.trajectory_id: warning_labels(len(it.symbols), it.outcome, horizon) for it in items}
    abstain = {s.trajectory_id: s.abstain for s in scored}
    report = metrics_report(ScoredPrefixSet.from_series(series, labels, abstain))
    report.pop("operating_points", None)
    report["abstention"] = report["abstained"] / max(1, report["abstained"] + report["n"])
    return report


def _gain(a, b):
    return None if a is None or b is None else a - b


def cmd_extract_dfa(args) -> Dict[str, Any]:
    """Induce on train symbols, calibrate on calibration, audit and score the held-out split"""
    check_role(args.split, args.allow_insample)
    manifest = RunManifest(command="extract-dfa")
    manifest.record_inputs([args.model, args.stepview, args.splits])
    model, vectorizer = load_model_dir(args.model)
    corpus = load_stepview_corpus(args.stepview)
    splits = load_splits(args.splits)
    horizon = model.config.horizon
    K = model.config.alphabet_size

    data = {role: symbolize_split(model, vectorizer, corpus, splits, role, args.route_key)
            for role in ("train", "calibration", args.split)}
    train, cal, target = data["train"], data["calibration"], data[args.split]

    dfa = induce_dfa([it.symbols for it in train], [it.outcome for it in train], K,
                     horizon, args.prefix_samples, source_model_hash=sha256_path(args.model))
    dfa = calibrate_state_risks(dfa, [it.symbols for it in cal], [it.outcome for it in cal],
                                horizon, args.min_count, args.fallback)
    threshold = warning_threshold(dfa, [it.symbols for it in cal], [it.outcome for it in cal],
                                  horizon, [it.trajectory_id for it in cal])
    dfa.info["warning_threshold"] = threshold if threshold != float("inf") else "inf"
    dfa.info["horizon"] = horizon

    audit = audit_dfa(dfa, [it.symbols for it in target], threshold)
    scored = [dfa_score_prefix(dfa, it.symbols, it.trajectory_id) for it in target]
    result: Dict[str, Any] = {
        "split": args.split,
        "dfa": args.out,
        "induction": {k: dfa.info[k] for k in ("samples", "positives", "ambiguous_removed", "pta_size", "merges")},
        "audit": audit.to_dict(),
        "metrics": prefix_metrics(scored, target, horizon),
    }

    if args.route_key:
        routed = induce_routed_dfa(args.route_key, train, cal, K, horizon, args.min_count, args.prefix_samples)
        routed_metrics = prefix_metrics([routed.score(it) for it in target], target, horizon)
        prior_metrics = prefix_metrics([routed.score_route_prior(it) for it in target], target, horizon)
        result["routed"] = {
            "route_key": args.route_key,
            "routes": len(routed.dfas),
            "total_states": routed.total_states,
            "route_states": {k: d.states for k, d in sorted(routed.dfas.items())},
            "metrics": routed_metrics,
            "route_prior_metrics": prior_metrics,
            "gain_over_global_auprc": _gain(routed_metrics["auprc"], result["metrics"]["auprc"]),
            "gain_over_route_prior_auprc": _gain(routed_metrics["auprc"], prior_metrics["auprc"]),
        }
        if args.routed_out:
            write_json(args.routed_out, routed.to_dict())

    save_dfa(args.out, dfa)
    if args.report:
        write_json(args.report, result)
    manifest.config = {
        "split": args.split, "min_count": args.min_count, "fallback": args.fallback,
        "prefix_samples": args.prefix_samples, "route_key": args.route_key,
    }
    manifest.seed = model.config.seed
    manifest.finish([args.out, args.report, args.routed_out if args.route_key else None])
    logging.info("[Automaton] Extracted DFA | states=%s | out=%s", dfa.states, args.out)
    return result


def cmd_audit(args) -> Dict[str, Any]:
    """Audit a stored DFA on a split, re-symbolising it with the model the DFA came from"""
    check_role(args.split, args.allow_insample)
    manifest = RunManifest(command="audit")
    manifest.record_inputs([args.dfa, args.model, args.stepview, args.splits])
    dfa = load_dfa(args.dfa)
    if dfa.source_model_hash and dfa.source_model_hash != sha256_path(args.model):
        raise RejectedInputError(f"{args.dfa} was not extracted from model {args.model}")
    model, vectorizer = load_model_dir(args.model)
    corpus = load_stepview_corpus(args.stepview)
    splits = load_splits(args.splits)

    threshold = float(dfa.info.get("warning_threshold", "inf"))
    target = symbolize_split(model, vectorizer, corpus, splits, args.split)
    report = audit_dfa(dfa, [it.symbols for it in target], threshold).to_dict()
    report["split"] = args.split
    if args.out:
        write_json(args.out, report)
        manifest.config = {"split": args.split}
        manifest.finish([args.out])
    return report


def _add_data_args(p) -> None:
    p.add_argument("--model", required=True, help="Trained monitor directory")
    p.add_argument("--stepview", required=True, help="StepView corpus (JSONL)")
    p.add_argument("--splits", required=True, help="Split file (JSON)")
    p.add_argument("--split", default="test", choices=("train", "calibration", "validation", "test"))
    p.add_argument("--allow-insample", action="store_true", help="Permit a split used for fitting")


def register(subparsers) -> None:
    p = subparsers.add_parser("extract-dfa", help="Induce and calibrate a DFA from monitor hard symbols")
    _add_data_args(p)
    p.add_argument("--min-count", type=int, default=MIN_COUNT, help="Calibration prefixes needed to trust a state")
    p.add_argument("--fallback", choices=FALLBACK_POLICIES, default="prevalence", help="Risk emitted by untrusted states")
    p.add_argument("--prefix-samples", action="store_true", help="Induce from labelled prefixes instead of full trajectories")
    p.add_argument("--route-key", default="", help="Also fit a routed DFA keyed by task_id or a step-1 metadata key")
    p.add_argument("--routed-out", default=None, help="Routed DFA JSON (with --route-key)")
    p.add_argument("--out", required=True, help="DFA JSON")
    p.add_argument("--report", default=None, help="Extraction report JSON")
    p.set_defaults(handler=cmd_extract_dfa)

    p = subparsers.add_parser("audit", help="Audit a calibrated DFA on a split")
    p.add_argument("--dfa", required=True, help="DFA JSON from extract-dfa")
    _add_data_args(p)
    p.add_argument("--out", default=None, help="Audit JSON")
    p.set_defaults(handler=cmd_audit)
