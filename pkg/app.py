"""
PrefixGuard command line - Clean Orchestrator
Minimal orchestration layer that registers every sub-app's commands
"""

import sys
import json
import logging
import argparse
from typing import List, Optional

from common.config import LOG_LEVEL, TOOLKIT_VERSION
from common.errors import RejectedInputError, UndefinedMetricError
from common.file_parser import dumps_canonical

# Import sub-app registrars
from common.app import register as register_common
from app_stepview.app import register as register_stepview
from app_encoder.app import register as register_encoder
from app_monitor.app import register as register_monitor
from app_automaton.app import register as register_automaton
from app_observability.app import register as register_observability
from app_probes.app import register as register_probes

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2

REGISTRARS = (
    register_common,          # synth, split
    register_stepview,        # convert, sample-pack
    register_encoder,         # fit-encoder
    register_monitor,         # train, eval, scan-horizon
    register_automaton,       # extract-dfa, audit
    register_observability,   # ceiling, mpe
    register_probes,          # probe
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefixguard",
        description="Trace-to-monitor synthesis: StepView conversion, prefix warning monitors, DFA audit, observability diagnostics",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOLKIT_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for register in REGISTRARS:
        register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    logging.info("[CLI] Command started | command=%s", args.command)
    try:
        result = args.handler(args)
    except (RejectedInputError, UndefinedMetricError, FileNotFoundError, json.JSONDecodeError) as e:
        logging.error("[CLI] Rejected input | command=%s | error=%s", args.command, e)
        return EXIT_INPUT
    except Exception:
        logging.exception("[CLI] Command failed | command=%s", args.command)
        return EXIT_INTERNAL
    sys.stdout.write(dumps_canonical(result) + "\n")
    logging.info("[CLI] Command finished | command=%s", args.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
