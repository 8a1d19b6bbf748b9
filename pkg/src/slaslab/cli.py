"""Command-line entry point: ``slaslab <command> [--config F] [--seed N] [--out D] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import COMMANDS, load_config
from .errors import ConfigError, SlasError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slaslab", description="Advantage-shaping verification suites and toy experiments.")
    parser.add_argument("command", nargs="?", choices=COMMANDS, help="command to run (may come from --config)")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a parameter (dotted path); repeatable, last wins")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.seed, args.out, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .harness import run

    try:
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SlasError, ArithmeticError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("residual", "record"):
            if getattr(exc, attr, None) is not None:
                record[attr] = getattr(exc, attr)
        print(json.dumps(record, default=str), file=sys.stderr)
        return EXIT_RUNTIME

    print(json.dumps({"command": cfg.command, "passed": result.passed, "output_dir": cfg.output_dir}))
    return EXIT_OK if result.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
