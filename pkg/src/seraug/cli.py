"""Command line entry point: ``seraug <stage> --config PATH [--seed N] [--dry-run]``.

Exit status: 0 success, 1 configuration / input validation error, 2 runtime failure.
The ``SERAUG_OUTPUT_ROOT`` environment variable relocates the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .dataset import ManifestError
from .pipeline import PIPELINE_ORDER, STAGES, MissingStageError, Workspace, build_plan, run_all, run_stage

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("seraug")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seraug", description="Triplet-guided GAN augmentation for speech emotion recognition")
    p.add_argument("stage", choices=(*STAGES, "run"),
                   help="pipeline stage to execute; 'run' executes all stages in order")
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
    p.add_argument("--dry-run", action="store_true", help="print the resolved plan and write nothing")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _print_plan(cfg, plan, stage):
    stages = PIPELINE_ORDER if stage == "run" else (stage,)
    print(f"config fingerprint: {cfg.fingerprint}")
    print(f"output directory: {Workspace(cfg).root}")
    print(f"stages: {' -> '.join(stages)}")
    print(plan.describe())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        plan = build_plan(cfg)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.dry_run:
        _print_plan(cfg, plan, args.stage)
        return EXIT_OK
    try:
        if args.stage == "run":
            run_all(cfg)
        else:
            run_stage(cfg, args.stage, plan)
    except (MissingStageError, ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and signal failure
        log.debug("stage failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
