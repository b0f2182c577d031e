"""Command-line pipeline runner.

Subcommands: simulate | eigen | deconstruct | diagnose | report.
Exit codes: 0 success, 2 validation failure, 3 numerical-stage failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import (
    ConfigError,
    DependentFrequenciesError,
    FlowDeconError,
    IntegrationBlowupError,
    MissingInputError,
)
from . import pipeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

_RUNNERS = {
    "simulate": pipeline.run_simulate,
    "eigen": pipeline.run_eigen,
    "deconstruct": pipeline.run_deconstruct,
    "diagnose": pipeline.run_diagnose,
    "report": pipeline.run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowdecon",
        description="Config-driven flow deconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override (u64)")
        p.add_argument("--stage", default=None,
                       help="restrict deconstruct/diagnose to one stage level")
        p.add_argument("--tolerance-scale", type=float, default=None,
                       help="multiply all residual bounds by this factor")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.tolerance_scale is not None:
            cfg.tolerance_scale = args.tolerance_scale
        if args.stage is not None:
            try:
                cfg.stage_filter = int(args.stage)
            except ValueError:
                raise ConfigError(f"--stage must be an integer level, got {args.stage}")
        result = _RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependentFrequenciesError as exc:
        print(f"dependent frequencies: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except IntegrationBlowupError as exc:
        print(f"integration blowup: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FlowDeconError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    status = result.get("status", "ok")
    print(f"{args.command}: {status}")
    if status in ("ok", "pass"):
        return EXIT_OK
    if status == "dependent-frequencies":
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
