"""
Command-line entry point for the coupling lab.

Usage:
    python -m app.cli run <config.ini | preset>
    python -m app.cli sweep <config.ini | preset> --axis hbar|dt|n_x --values 0.5 0.25 0.125
    python -m app.cli report <directory>
    python -m app.cli presets list

Exit code 0 iff every report passes. LAB_OUTPUT_ROOT sets where runs land.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.core.config import settings
from app.core.exceptions import LabError
from app.schemas.experiment import ExperimentConfig
from app.services import harness

logger = logging.getLogger("app.cli")


def _load(target: str) -> ExperimentConfig:
    """A path to an .ini file, or the name of a shipped preset"""
    path = Path(target)
    if path.suffix == ".ini" or path.is_file():
        return ExperimentConfig.load(path)
    return harness.load_preset(target)


def cmd_run(args: argparse.Namespace) -> int:
    manifest = harness.run(_load(args.config))
    print(harness.report([manifest]), end="")
    print(f"outputs: {manifest.output_dir}")
    return 0 if manifest.passed else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    result = harness.sweep(_load(args.config), args.axis, args.values)
    print(harness.report(list(result.manifests)), end="")
    print(
        f"{result.axis} sweep: log-log slope {result.loglog_slope:.4f}, "
        f"linear slope {result.linear_slope:.4f}, monotone decreasing {result.monotone_decreasing}"
    )
    print(f"convergence table: {result.csv_path}")
    return 0 if all(m.passed for m in result.manifests) else 1


def cmd_report(args: argparse.Namespace) -> int:
    manifests = harness.load_manifests(args.directory)
    if not manifests:
        logger.error(f"No manifest.json found under {args.directory}")
        return 1
    print(harness.report(manifests, out_dir=args.directory), end="")
    return 0 if all(m.passed for m in manifests) else 1


def cmd_presets(args: argparse.Namespace) -> int:
    for name, path in harness.list_presets().items():
        config = ExperimentConfig.load(path)
        print(f"{name:<24} {config.experiment.kind.value:<18} {config.short_hash}  {config.experiment.description or ''}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.cli", description=settings.PROJECT_NAME)
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to an .ini config or a preset name")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="independent runs along one axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_AXES))
    p_sweep.add_argument("--values", required=True, nargs="+", type=float)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="summarise the manifests under a directory")
    p_report.add_argument("directory")
    p_report.set_defaults(func=cmd_report)

    p_presets = sub.add_parser("presets", help="shipped experiment configs")
    p_presets.add_argument("action", choices=["list"])
    p_presets.set_defaults(func=cmd_presets)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except LabError as e:
        logger.error(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
