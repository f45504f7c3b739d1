"""Command-line front end.

Exit codes: 0 ok, 1 usage error, 2 invariant violation, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .config import UsageError, load_config
from .scheduler import ScheduleError

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3

COMMANDS = {
    "calibrate": experiment.cmd_calibrate,
    "prefill": experiment.cmd_prefill,
    "schedule": experiment.cmd_schedule,
    "report": experiment.cmd_report,
    "demo": experiment.cmd_demo,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--chunk-len", type=int)
    common.add_argument("--quant-mode", choices=["all", "float32", "w8a8-naive", "w8a8-shadow"])
    common.add_argument("--prune-rate", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="npu-prefill", description="Desk-scale NPU prefill pipeline experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("calibrate", parents=[common], help="profile activations, write hot channels and importance")
    sub.add_parser("prefill", parents=[common], help="chunked prefill in every quant mode, oracle errors and traces")
    sub.add_parser("schedule", parents=[common], help="in-order vs out-of-order scheduling of the traced subgraphs")
    rp = sub.add_parser("report", parents=[common], help="merge JSON fragments into report.json and summary.txt")
    rp.add_argument("fragments", nargs="*", help="fragment files (default: every fragment in --out)")
    sub.add_parser("demo", parents=[common], help="calibrate, prefill, schedule, decode and report in one go")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        overrides = {
            "seed": args.seed,
            "chunk_len": args.chunk_len,
            "quant_mode": args.quant_mode,
            "prune_rate": args.prune_rate,
            "out": args.out,
        }
        cfg = load_config(args.config, overrides=overrides)
        if args.command == "report":
            result = experiment.cmd_report(cfg, args.fragments or None)
            print(experiment.summarize(result), end="")
        else:
            COMMANDS[args.command](cfg)
            if args.command == "demo":
                print((experiment.Path(cfg.out) / "summary.txt").read_text(), end="")
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (experiment.InvariantViolation, ScheduleError, ValueError) as e:
        # validators and schema checks raise ValueError; UsageError was handled above
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
