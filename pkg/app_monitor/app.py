"""
Monitor commands: train, eval, scan-horizon
"""

import os
import logging
from dataclasses import replace
from typing import Any, Dict, List, Sequence

from common.artifacts import RunManifest, verify_artifact
from common.config import load_config
from common.errors import SplitLeakageError, VectorizerMismatchError
from common.file_parser import load_splits, write_csv, write_json, write_jsonl
from common.metrics import (
    ScoredPrefixSet,
    aggregate_reports,
    first_alert_diagnostics,
    metrics_report,
    precision_recall_points,
    roc_points,
)
from common.trace_model import SplitSpec, select
from app_encoder.vectorizer import (
    EncoderConfig,
    EncodedTrajectory,
    encode_corpus,
    fit_vectorizer,
    load_vectorizer,
    save_vectorizer,
)
from app_stepview.adapter import StepViewTrajectory, load_stepview_corpus

from .model import VECTORIZER_FILE, MonitorConfig, MonitorModel, score_corpus
from .thresholds import select_thresholds
from .training import (
    pooled_arrays,
    risk_series,
    scan_horizon,
    series_labels,
    shuffled_label_control,
    train_monitor,
)

REPORT_FILE = "train_report.json"
FIT_ROLES = ("train", "calibration")
DEFAULT_FAR_CAPS = (0.05, 0.10, 0.20)


def _monitor_config(args) -> MonitorConfig:
    config = load_config(MonitorConfig, args.config) if args.config else MonitorConfig()
    overrides = {}
    for name in ("seed", "backend", "epochs", "horizon"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    config = replace(config, **overrides)
    config.validate()
    return config


def _encode_splits(corpus: Sequence[StepViewTrajectory], splits: SplitSpec, vectorizer, roles: Sequence[str]):
    return {role: encode_corpus(vectorizer, select(corpus, splits.ids(role))) for role in roles}


def cmd_train(args) -> Dict[str, Any]:
    """Fit the vectorizer (train split only, unless given), train the monitor, save the model directory"""
    manifest = RunManifest(command="train")
    manifest.record_inputs([args.stepview, args.splits, args.config, args.vectorizer])
    config = _monitor_config(args)
    corpus = load_stepview_corpus(args.stepview)
    splits = load_splits(args.splits)

    if args.vectorizer:
        vectorizer = load_vectorizer(args.vectorizer)
        if tuple(vectorizer.config.excluded_fields) != tuple(config.excluded_fields):
            raise VectorizerMismatchError("Vectorizer excluded_fields differ from the monitor config")
    else:
        texts = [x for t in select(corpus, splits.train_ids) for x in t.texts(exclude=config.excluded_fields)]
        vectorizer = fit_vectorizer(texts, EncoderConfig(excluded_fields=config.excluded_fields))

    encoded = _encode_splits(corpus, splits, vectorizer, ("train", "calibration", "validation"))
    if args.shuffle_labels:
        logging.info("[Monitor] Shuffled-label control run | seed=%s", config.seed)
        encoded = {role: shuffled_label_control(items, config.seed, config.horizon) for role, items in encoded.items()}
    model, report = train_monitor(encoded["train"], encoded["calibration"], encoded["validation"], config)

    model.info["shuffled_labels"] = bool(args.shuffle_labels)
    model.save(args.out)
    save_vectorizer(os.path.join(args.out, VECTORIZER_FILE), vectorizer)
    write_json(os.path.join(args.out, REPORT_FILE), report.to_dict())

    manifest.config = config.to_dict()
    manifest.seed = config.seed
    manifest.extra = {"vectorizer_hash": vectorizer.hash, "best_epoch": report.best_epoch}
    manifest.finish([args.out])
    return {
        "out": args.out,
        "best_epoch": report.best_epoch,
        "best_validation_auprc": report.best_validation_auprc,
        "calibration_f1_threshold": report.calibration_f1_threshold,
    }


def load_model_dir(directory: str):
    verify_artifact(directory)
    model = MonitorModel.load(directory)
    vectorizer = load_vectorizer(os.path.join(directory, VECTORIZER_FILE))
    if vectorizer.hash != model.vectorizer_hash:
        raise VectorizerMismatchError(f"{directory}: stored vectorizer does not match the model")
    return model, vectorizer


def check_role(role: str, allow_insample: bool, fit_roles: Sequence[str] = FIT_ROLES) -> None:
    if role in fit_roles and not allow_insample:
        raise SplitLeakageError(f"Split {role!r} was used for fitting; pass --allow-insample to evaluate it anyway")


def evaluate_model(
    model: MonitorModel,
    calibration: List[EncodedTrajectory],
    target: List[EncodedTrajectory],
    far_caps: Sequence[float],
) -> Dict[str, Any]:
    """Thresholds from calibration only, then pooled and first-alert metrics on the target split"""
    horizon = model.config.horizon
    cal_series = risk_series(model, calibration)
    cal_labels = series_labels(calibration, horizon)
    thresholds = select_thresholds(cal_series, cal_labels, far_caps)

    series = risk_series(model, target)
    labels = series_labels(target, horizon)
    report = metrics_report(ScoredPrefixSet.from_series(series, labels), thresholds)
    report["first_alert"] = {
        name: first_alert_diagnostics(series, th, horizon).to_dict() for name, th in thresholds.items()
    }
    report["calibration_far"] = {
        name: first_alert_diagnostics(cal_series, th, horizon).far for name, th in thresholds.items()
    }
    report["thresholds"] = {k: (v if v != float("inf") else "inf") for k, v in thresholds.items()}
    report["horizon"] = horizon
    return report


def cmd_eval(args) -> Dict[str, Any]:
    check_role(args.split, args.allow_insample)
    manifest = RunManifest(command="eval")
    manifest.record_inputs([args.stepview, args.splits, *args.model])
    corpus = load_stepview_corpus(args.stepview)
    splits = load_splits(args.splits)

    reports = []
    for index, directory in enumerate(args.model):
        model, vectorizer = load_model_dir(directory)
        encoded = _encode_splits(corpus, splits, vectorizer, ("calibration", args.split))
        if model.info.get("shuffled_labels"):
            cfg = model.config
            encoded = {role: shuffled_label_control(items, cfg.seed, cfg.horizon) for role, items in encoded.items()}
        report = evaluate_model(model, encoded["calibration"], encoded[args.split], args.far_caps)
        report["model"] = directory
        report["seed"] = model.config.seed
        report["shuffled_labels"] = bool(model.info.get("shuffled_labels"))
        reports.append(report)

        if args.curves_dir:
            series = risk_series(model, encoded[args.split])
            y, s = pooled_arrays(series, series_labels(encoded[args.split], model.config.horizon))
            write_csv(os.path.join(args.curves_dir, f"pr_{index}.csv"), precision_recall_points(y, s),
                      ["threshold", "precision", "recall"])
            write_csv(os.path.join(args.curves_dir, f"roc_{index}.csv"), roc_points(y, s),
                      ["threshold", "fpr", "tpr"])
        if args.risk_out:
            path = args.risk_out if len(args.model) == 1 else f"{args.risk_out}.{index}"
            write_jsonl(path, (r.to_dict() for r in score_corpus(model, encoded[args.split])))

    result: Dict[str, Any] = {"split": args.split, "models": reports}
    if len(reports) > 1:
        result["aggregate"] = aggregate_reports(reports)
    if args.out:
        write_json(args.out, result)
        manifest.config = {"split": args.split, "far_caps": list(args.far_caps)}
        manifest.finish([args.out])
    logging.info("[Monitor] Evaluated | split=%s | models=%s", args.split, len(reports))
    return result


def cmd_scan_horizon(args) -> Dict[str, Any]:
    manifest = RunManifest(command="scan-horizon")
    manifest.record_inputs([args.stepview, args.splits, args.config])
    config = _monitor_config(args)
    corpus = load_stepview_corpus(args.stepview)
    splits = load_splits(args.splits)
    texts = [x for t in select(corpus, splits.train_ids) for x in t.texts(exclude=config.excluded_fields)]
    vectorizer = fit_vectorizer(texts, EncoderConfig(excluded_fields=config.excluded_fields))
    encoded = _encode_splits(corpus, splits, vectorizer, ("train", "calibration", "validation"))

    rows = scan_horizon(encoded["train"], encoded["calibration"], encoded["validation"], config, args.horizons)
    result = {"split": "validation", "rows": rows}
    if args.out:
        write_json(args.out, result)
        manifest.config = {**config.to_dict(), "horizons": list(args.horizons)}
        manifest.finish([args.out])
    return result


def _add_monitor_overrides(p) -> None:
    p.add_argument("--config", default=None, help="MonitorConfig JSON")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    p.add_argument("--backend", choices=("gru", "fsm"), default=None, help="Override the risk backend")
    p.add_argument("--epochs", type=int, default=None, help="Override the epoch count")


def register(subparsers) -> None:
    p = subparsers.add_parser("train", help="Train a prefix warning monitor")
    p.add_argument("--stepview", required=True, help="StepView corpus (JSONL)")
    p.add_argument("--splits", required=True, help="Split file (JSON)")
    p.add_argument("--vectorizer", default=None, help="Pre-fitted vectorizer (default: fit on train)")
    p.add_argument("--shuffle-labels", action="store_true", help="Permute pooled prefix labels within each split (null control)")
    p.add_argument("--out", required=True, help="Model directory")
    _add_monitor_overrides(p)
    p.set_defaults(handler=cmd_train)

    p = subparsers.add_parser("eval", help="Evaluate one or more trained monitors")
    p.add_argument("--model", nargs="+", required=True, help="Model directories (several = seed aggregate)")
    p.add_argument("--stepview", required=True, help="StepView corpus (JSONL)")
    p.add_argument("--splits", required=True, help="Split file (JSON)")
    p.add_argument("--split", default="test", choices=("train", "calibration", "validation", "test"))
    p.add_argument("--far-caps", type=float, nargs="*", default=list(DEFAULT_FAR_CAPS))
    p.add_argument("--allow-insample", action="store_true", help="Permit evaluating a split used for fitting")
    p.add_argument("--curves-dir", default=None, help="Write PR / ROC curve CSVs here")
    p.add_argument("--risk-out", default=None, help="Write per-trajectory risk series (JSONL)")
    p.add_argument("--out", default=None, help="Metrics JSON")
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser("scan-horizon", help="Retrain per horizon H and report validation metrics")
    p.add_argument("--stepview", required=True, help="StepView corpus (JSONL)")
    p.add_argument("--splits", required=True, help="Split file (JSON)")
    p.add_argument("--horizons", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--out", default=None, help="Scan results JSON")
    _add_monitor_overrides(p)
    p.set_defaults(handler=cmd_scan_horizon)
