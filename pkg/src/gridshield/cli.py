"""``gridshield`` command line: one subcommand per stage plus ``pipeline``.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, MissingArtifactError, StageError
from .pipeline import STAGES, Runner

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_MISSING = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--out", help="output directory; overrides the config")
    common.add_argument("--parallel", type=int, help="worker threads for NAS, compression and the attack matrix")
    common.add_argument("--resume", action="store_true", help="skip stages whose outputs match the config")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="gridshield", description="Theft-detector design, compression and "
                                     "adversarial robustness benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out, parallel=args.parallel)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    runner = Runner(cfg, cfg.output_dir, resume=args.resume)

    def report(stage: str, status: str) -> None:
        print(f"{stage}: {status}", flush=True)

    try:
        if args.command == "pipeline":
            runner.pipeline(report)
        else:
            report(args.command, runner.run(args.command))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
