"""Command-line entry point.

Subcommands mirror the pipeline stages::

    koopformer generate         --config exp.json --out runs/exp
    koopformer train-embedding  --config exp.json --out runs/exp
    koopformer train-transformer --config exp.json --out runs/exp
    koopformer train-baseline   --config exp.json --out runs/exp
    koopformer rollout          --config exp.json --out runs/exp
    koopformer evaluate         --config exp.json --out runs/exp
    koopformer all              --config exp.json --out runs/exp

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical divergence, 5 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, DivergenceError, PrerequisiteError
from .pipeline import STAGES, parse_config, run_pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5


def build_parser():
    parser = argparse.ArgumentParser(
        prog="koopformer",
        description="Surrogate modeling of dynamical systems with Koopman "
                    "embeddings and transformer decoders.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the '{stage}' stage")
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory for artifacts")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's master seed")
        p.add_argument("--force", action="store_true",
                       help="rebuild artifacts whose config hash changed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS/threadpool parallelism")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = (lambda message: None) if args.quiet else \
        (lambda message: print(message, flush=True))
    try:
        config = parse_config(args.config)
        if args.seed is not None:
            raw = dict(config.raw)
            raw["seed"] = args.seed
            # re-derive every seed that the original config left implicit
            user = _reseed(raw, args.config)
            config = parse_config(user)
        run_pipeline(config, args.stage, args.out, force=args.force,
                     threads=args.threads, log=log)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as err:
        print(f"prerequisite error: {err}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except DivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _reseed(raw, source_path):
    """Rebuild the user config with a new master seed so derived sub-seeds
    are re-materialized rather than inherited."""
    import json
    from pathlib import Path

    user = json.loads(Path(source_path).read_text())
    user["seed"] = raw["seed"]
    return user


if __name__ == "__main__":
    sys.exit(main())
