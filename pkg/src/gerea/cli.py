"""Command-line entry point: ``gerea <command> --config FILE [--force] [--seed INT] [--workers INT] [--profile P]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import PROFILES, STAGES, load_config
from .exceptions import GereaError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("gerea")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gerea", description="Question-aware captioning and fusion-in-decoder reasoning for knowledge-based VQA.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        sp = sub.add_parser(name, help="run every stage in order" if name == "run" else f"run the {name} stage")
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--force", action="store_true", help="overwrite artifacts produced under a different config")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--workers", type=int, help="worker threads per stage")
        sp.add_argument("--profile", choices=PROFILES, help="'test' forces deterministic decoding")
        sp.add_argument("-v", "--verbose", action="store_true")
    fx = sub.add_parser("fixture", help="write the 8-sample synthetic dataset and a test-profile config")
    fx.add_argument("directory")
    fx.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fixture":
            from .fixtures import write_fixture

            cfg_path = write_fixture(args.directory)
            print(cfg_path)
            return EXIT_OK
        from .pipeline import Pipeline

        cfg = load_config(args.config, seed=args.seed, workers=args.workers, profile=args.profile)
        pipe = Pipeline(cfg, force=args.force)
        stages = STAGES if args.command == "run" else (args.command,)
        for stage in stages:
            status = pipe.run_stage(stage)
            print(f"{stage}: {status}")
        return EXIT_OK
    except GereaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # anything else is a bug or an environment failure
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
