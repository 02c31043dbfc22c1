"""
Observability commands: ceiling, mpe
"""

import logging
from typing import Any, Dict

import numpy as np

from common.artifacts import RunManifest
from common.errors import RejectedInputError
from common.file_parser import load_splits, read_json, write_csv, write_json
from common.trace_model import select
from app_encoder.vectorizer import encode_texts, fit_probe_vectorizer
from app_monitor.app import check_role
from app_probes.audit_set import PROTOCOLS, build_mpe_audit_set
from app_probes.logistic import DEFAULT_C, fit_logistic
from app_stepview.adapter import load_stepview_corpus

from .ceiling import ceiling, ceiling_grid, naive_bound, required_pi
from .mpe import REPLICATES, TAIL_TRIM, explicit_evidence_anchor, explicit_evidence_rates, mpe_bootstrap

GRID_POINTS = 101


def cmd_ceiling(args) -> Dict[str, Any]:
    """Forward ceiling values / curves, or the required pi for an achieved AUPRC"""
    if args.invert:
        auprc, r = args.invert
        pi = required_pi(auprc, r)
        return {"auprc": auprc, "r": r, "required_pi": pi}

    if not args.r:
        raise RejectedInputError("ceiling needs --r (one or more positive-prefix rates) or --invert A R")
    pis = args.pi if args.pi else list(np.linspace(0.0, 1.0, GRID_POINTS))
    if args.csv:
        manifest = RunManifest(command="ceiling", config={"pi": [float(p) for p in pis], "r": list(args.r)})
        rows = ceiling_grid(pis, args.r)
        write_csv(args.csv, rows, ["pi", "r", "ceiling", "naive"])
        manifest.finish([args.csv])
        return {"csv": args.csv, "rows": len(rows)}
    return {
        "rows": [
            {"pi": float(p), "r": r, "ceiling": ceiling(p, r), "naive": naive_bound(p, r)}
            for r in args.r for p in pis
        ]
    }


def _probe_scores(stepview: str, splits_path: str, split: str, protocol: str, horizon: int, seed: int):
    """Independent TF-IDF + logistic probe: fitted on train audit prefixes, scored on the held-out ones"""
    corpus = load_stepview_corpus(stepview)
    splits = load_splits(splits_path)
    train = build_mpe_audit_set(select(corpus, splits.train_ids), protocol, horizon)
    held_out = build_mpe_audit_set(select(corpus, splits.ids(split)), protocol, horizon)

    train_texts = list(train.positive_texts + train.negative_texts)
    labels = np.r_[np.ones(len(train.positive_texts)), np.zeros(len(train.negative_texts))]
    vectorizer = fit_probe_vectorizer(train_texts)
    probe = fit_logistic(encode_texts(vectorizer, train_texts), labels, DEFAULT_C, balanced=True, seed=seed)
    positive = probe.predict_proba(encode_texts(vectorizer, list(held_out.positive_texts)))
    negative = probe.predict_proba(encode_texts(vectorizer, list(held_out.negative_texts)))
    return positive, negative, train, held_out


def cmd_mpe(args) -> Dict[str, Any]:
    manifest = RunManifest(command="mpe")
    if args.scores:
        manifest.record_inputs([args.scores])
        payload = read_json(args.scores)
        try:
            positive, negative = payload["positive"], payload["negative"]
        except (KeyError, TypeError) as e:
            raise RejectedInputError(f"{args.scores}: expected an object with 'positive' and 'negative' arrays") from e
        result: Dict[str, Any] = {"source": "scores"}
    else:
        if not (args.stepview and args.splits):
            raise RejectedInputError("mpe needs --scores, or --stepview with --splits")
        check_role(args.split, args.allow_insample, ("train",))
        manifest.record_inputs([args.stepview, args.splits])
        positive, negative, train, held_out = _probe_scores(
            args.stepview, args.splits, args.split, args.protocol, args.horizon, args.seed,
        )
        q_plus, q_minus = explicit_evidence_rates(held_out.positive_texts, held_out.negative_texts)
        result = {
            "source": "probe",
            "split": args.split,
            "train_audit": train.summary(),
            "audit": held_out.summary(),
            "evidence_anchor": explicit_evidence_anchor(q_plus, q_minus).to_dict(),
        }

    estimate = mpe_bootstrap(positive, negative, args.replicates, args.seed, args.trim)
    result["mpe"] = estimate.to_dict()
    if args.out:
        write_json(args.out, result)
        manifest.config = {"trim": args.trim, "replicates": args.replicates, "protocol": args.protocol,
                           "horizon": args.horizon}
        manifest.seed = args.seed
        manifest.finish([args.out])
    logging.info("[MPE] Estimated | pi_hat=%.4f | source=%s", estimate.pi_hat, result["source"])
    return result


def register(subparsers) -> None:
    p = subparsers.add_parser("ceiling", help="AUPRC observability ceiling and its inverse")
    p.add_argument("--pi", type=float, nargs="*", default=None, help="Observable fractions (default: 101-point grid)")
    p.add_argument("--r", type=float, nargs="*", default=None, help="Positive-prefix rates")
    p.add_argument("--invert", type=float, nargs=2, metavar=("AUPRC", "R"), default=None,
                   help="Return the smallest pi whose ceiling reaches AUPRC at rate R")
    p.add_argument("--csv", default=None, help="Write the (pi, r, ceiling, naive) grid as CSV")
    p.set_defaults(handler=cmd_ceiling)

    p = subparsers.add_parser("mpe", help="Trimmed CDF-ratio mixture-proportion estimate with bootstrap CI")
    p.add_argument("--scores", default=None, help="JSON with 'positive' and 'negative' probe score arrays")
    p.add_argument("--stepview", default=None, help="StepView corpus (JSONL); fits the independent probe")
    p.add_argument("--splits", default=None, help="Split file (JSON)")
    p.add_argument("--split", default="test", choices=("train", "calibration", "validation", "test"))
    p.add_argument("--allow-insample", action="store_true", help="Permit auditing a split used for fitting")
    p.add_argument("--protocol", choices=PROTOCOLS, default="matched_nonterminal")
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--trim", type=float, default=TAIL_TRIM)
    p.add_argument("--replicates", type=int, default=REPLICATES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="MPE report JSON")
    p.set_defaults(handler=cmd_mpe)
