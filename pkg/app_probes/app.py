"""
Probe command: probe
"""

import logging
from typing import Any, Dict

from common.artifacts import RunManifest
from common.config import load_config
from common.file_parser import load_splits, write_json
from common.trace_model import select
from app_monitor.app import check_role
from app_monitor.model import MonitorConfig
from app_stepview.adapter import load_stepview_corpus

from .controls import CONTROL_KINDS, ControlConfig, run_control

FIT_ROLES = ("train", "calibration", "validation")


def cmd_probe(args) -> Dict[str, Any]:
    """Fit one control / probe on the fitting splits and report AP and ROC on the held-out split"""
    check_role(args.split, args.allow_insample, FIT_ROLES)
    manifest = RunManifest(command="probe")
    manifest.record_inputs([args.stepview, args.splits, args.config, args.monitor_config])
    config = load_config(ControlConfig, args.config) if args.config else ControlConfig()
    monitor = load_config(MonitorConfig, args.monitor_config) if args.monitor_config else MonitorConfig()
    corpus = load_stepview_corpus(args.stepview)
    splits = load_splits(args.splits)

    fitting = {role: select(corpus, splits.ids(role)) for role in FIT_ROLES}
    evaluation = select(corpus, splits.ids(args.split))
    rows = [run_control(kind, fitting, evaluation, config, monitor) for kind in args.kind]
    result = {"split": args.split, "horizon": config.horizon, "rows": rows}

    if args.out:
        write_json(args.out, result)
        manifest.config = {**config.to_dict(), "kinds": list(args.kind), "split": args.split}
        manifest.seed = config.seed
        manifest.finish([args.out])
    logging.info("[Probe] Controls evaluated | kinds=%s | split=%s", ",".join(args.kind), args.split)
    return result


def register(subparsers) -> None:
    p = subparsers.add_parser("probe", help="Run confound controls and supervised prefix probes")
    p.add_argument("--kind", nargs="+", choices=CONTROL_KINDS, required=True, help="Controls to run")
    p.add_argument("--stepview", required=True, help="StepView corpus (JSONL)")
    p.add_argument("--splits", required=True, help="Split file (JSON)")
    p.add_argument("--split", default="test", choices=("train", "calibration", "validation", "test"))
    p.add_argument("--allow-insample", action="store_true", help="Permit evaluating a split used for fitting")
    p.add_argument("--config", default=None, help="ControlConfig JSON")
    p.add_argument("--monitor-config", default=None, help="MonitorConfig JSON for the scrambled control")
    p.add_argument("--out", default=None, help="Control report JSON")
    p.set_defaults(handler=cmd_probe)
