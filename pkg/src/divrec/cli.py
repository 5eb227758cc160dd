"""Command-line entry point.

Exit status: 0 on success, 1 when a stage finished but flagged a numerical
error, 2 for usage, configuration or missing-prerequisite errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import BETA_GRID, ConfigError, build_config, load_config_file
from .mf import LEARNING_RATE_GRID, NumericalError, REGULARIZATION_GRID

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("divrec")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divrec", description=(
        "Diversity-aware recommendation pipeline: ingest MovieLens, pretrain factor models, "
        "train the DPP actor-critic agent and evaluate it offline and against a simulated user."))
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--dataset", choices=("ml100k", "ml1m"))
    p.add_argument("--stage", choices=pipeline.STAGES + ("all",),
                   help="stage to run; 'all' runs every stage in order")
    p.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
    p.add_argument("--beta", type=float, help="DPP relevance/diversity trade-off in (0, 1)")
    p.add_argument("--out", help="output directory for artifacts and manifest")
    p.add_argument("--epochs", type=int,
                   help="recommendation epochs T for both evaluation stages")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--show-grid", action="store_true",
                   help="print the admissible factor-model grid values and beta grid, then exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = value
    for key in ("dataset", "seed", "beta", "out"):
        value = getattr(args, key)
        if value is not None:
            over[key] = value
    if args.epochs is not None:
        over["offline_epochs"] = over["online_epochs"] = args.epochs
    return over


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.show_grid:
        print("mf_learning_rate:", " ".join(repr(v) for v in LEARNING_RATE_GRID))
        print("mf_regularization:", " ".join(repr(v) for v in REGULARIZATION_GRID))
        print("beta:", " ".join(repr(v) for v in BETA_GRID))
        return EXIT_OK
    if args.stage is None:
        print("divrec: --stage is required", file=sys.stderr)
        return EXIT_USAGE

    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = build_config(file_values, _overrides(args))
    except (ConfigError, OSError) as exc:
        print(f"divrec: {exc}", file=sys.stderr)
        return EXIT_USAGE

    stages = pipeline.STAGES if args.stage == "all" else (args.stage,)
    status = EXIT_OK
    for stage in stages:
        try:
            result = pipeline.run_stage(stage, cfg)
        except pipeline.DependencyError as exc:
            print(f"divrec: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except FileNotFoundError as exc:
            print(f"divrec: {stage}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except NumericalError as exc:
            print(f"divrec: {stage}: numerical error: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"{stage}: wrote {', '.join(result.artifacts)}")
        if result.numerical_flags:
            print(f"divrec: {stage}: {result.numerical_flags} numerical flag(s) raised",
                  file=sys.stderr)
            status = EXIT_NUMERICAL
    return status


if __name__ == "__main__":
    sys.exit(main())
