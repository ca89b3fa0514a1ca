"""Command-line entry point: ``surgforge <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import Config, load_config
from .errors import ConfigError, SurgforgeError
from .pipeline import STAGES, Pipeline

log = logging.getLogger("surgforge")


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; argparse's default is 2, which is reserved for config errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", choices=("live", "mock", "record"))
    common.add_argument("--endpoint", help="OpenAI-compatible base URL")
    common.add_argument("--model", help="model id for extraction and generation")
    common.add_argument("--judge-model", help="model id for judging")
    common.add_argument("--max-in-flight", type=int)
    common.add_argument("--prompt-version", help="extraction prompt version")
    common.add_argument("--force", action="store_true", help="re-run even if outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="surgforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    return parser


def apply_overrides(config: Config, args: argparse.Namespace) -> Config:
    top = {
        "out": args.out,
        "seed": args.seed,
        "backend": args.backend,
        "endpoint": args.endpoint,
        "model": args.model,
        "judge_model": args.judge_model,
        "max_in_flight": args.max_in_flight,
    }
    config = replace(config, **{k: v for k, v in top.items() if v is not None})
    if args.prompt_version:
        config = replace(config, extract=replace(config.extract, prompt_version=args.prompt_version))
    config.validate()
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        config = apply_overrides(load_config(args.config), args)
        pipe = Pipeline(config, force=args.force)
        stages = STAGES if args.command == "run" else (args.command,)
        for name in stages:
            status = getattr(pipe, name)()
            print(f"{name}: {status}")
        print(f"backend calls: {pipe.backend_calls}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SurgforgeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
