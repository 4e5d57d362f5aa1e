"""
Command-line entry point for the dermatriage batch tools.

    dermatriage saliency --manifest cases.json --out runs/maps
    dermatriage evaluate --manifest cases.json --out runs/iou --maps runs/maps
    dermatriage triage   --manifest cases.json --out runs/triage --decision-date 2026-04-24
    dermatriage metrics  --manifest cases.json --out runs/metrics --paired gp_paired.csv
    dermatriage fixtures --out fixtures

Defaults for the numeric flags come from the environment (see .env.example).
"""

import argparse
import sys
from datetime import date
from pathlib import Path

from dermatriage.logger import logger
from dermatriage.modules.commands import (
    MissingReferenceLabels,
    cmd_evaluate,
    cmd_fixtures,
    cmd_metrics,
    cmd_saliency,
    cmd_triage,
)
from dermatriage.modules.tensor_io import IoFailure, ParseError
from dermatriage.modules.triage import RegistryCorrupt
from dermatriage.utils.config import ConfigError, RunConfig

COMMANDS = {
    "saliency": cmd_saliency,
    "evaluate": cmd_evaluate,
    "triage": cmd_triage,
    "metrics": cmd_metrics,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, required=True, help="JSON manifest of cases.")
    common.add_argument("--out", type=Path, required=True, help="Output directory.")
    common.add_argument("--tau", type=float, help="Saliency binarisation threshold in [0, 1].")
    common.add_argument("--green-threshold", type=float, help="Green/Yellow boundary (default 0.15).")
    common.add_argument("--red-threshold", type=float, help="Yellow/Red boundary (default 0.50).")
    common.add_argument("--confidence", type=float, help="Confidence level of the exact intervals.")
    common.add_argument("--jobs", type=int, help="Cases processed in parallel.")
    common.add_argument("--case", dest="case_ids", action="append", metavar="CASE_ID",
                        help="Restrict the run to this case (repeatable).")

    parser = argparse.ArgumentParser(prog="dermatriage", description="Dermoscopy screening batch tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    saliency = sub.add_parser("saliency", parents=[common], help="Compute saliency maps.")
    saliency.add_argument("--residual-weight", type=float, help="Identity weight of each rollout factor.")
    saliency.add_argument("--rollout-target", type=int, help="Token row read from the rollout matrix.")
    saliency.add_argument("--pgm", dest="write_pgm", action="store_true", help="Also write P5 graymaps.")

    evaluate = sub.add_parser("evaluate", parents=[common], help="IoU against expert annotations.")
    evaluate.add_argument("--maps", dest="maps_dir", type=Path,
                          help="Output folder of a saliency run; maps are recomputed when omitted.")
    evaluate.add_argument("--residual-weight", type=float)
    evaluate.add_argument("--rollout-target", type=int)

    triage = sub.add_parser("triage", parents=[common], help="Route cases and update the registry.")
    triage.add_argument("--decision-date", type=date.fromisoformat, help="Registry decision date (ISO).")
    triage.add_argument("--followup-date", type=date.fromisoformat,
                        help="Date the follow-up list is computed for (default: decision date).")
    triage.add_argument("--registry", dest="registry_path", type=Path, help="Registry event log path.")

    metrics = sub.add_parser("metrics", parents=[common], help="Diagnostic accuracy report.")
    metrics.add_argument("--paired", dest="paired_path", type=Path,
                         help="CSV with case_id, correct_without, correct_with for McNemar's test.")

    fixtures = sub.add_parser("fixtures", help="Write the bundled fixtures.")
    fixtures.add_argument("--out", type=Path, required=True)

    return parser


def config_from_args(args):
    overrides = {
        name: getattr(args, name, None)
        for name in ("tau", "green_threshold", "red_threshold", "confidence", "jobs", "residual_weight",
                     "rollout_target", "decision_date", "followup_date", "registry_path", "maps_dir",
                     "paired_path")
    }
    overrides["write_pgm"] = getattr(args, "write_pgm", False)
    return RunConfig.from_env(args.manifest, args.out, **overrides)


def main(argv=None):
    """Run one subcommand; returns the process exit status."""
    args = build_parser().parse_args(argv)

    if args.command == "fixtures":
        result = cmd_fixtures(args.out)
        for name, path in result.outputs.items():
            logger.info(f"{name}: {path}")
        return result.exit_code

    try:
        config = config_from_args(args)
        result = COMMANDS[args.command](config, args.case_ids)
    except (ConfigError, MissingReferenceLabels, ParseError, IoFailure, RegistryCorrupt, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1

    logger.info(f"{args.command} finished with {len(result.errors)} case errors")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
