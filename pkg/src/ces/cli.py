"""Command-line entry point.

Only the standard library is imported at module load so that CES_THREADS can
cap the BLAS thread pools before numpy initializes them. Environment:

    CES_RUN_DIR   default for --run
    CES_THREADS   worker threads for BLAS/OpenMP (set before numpy loads)

Exit codes: 0 success, 2 configuration or domain error, 3 missing or stale
upstream artifacts, 4 numerical failure.
"""

import argparse
import os
import sys

COMMANDS = ("generate-truth", "calibrate", "emulate", "sample", "predict",
            "benchmark", "report")


def _parser():
    parser = argparse.ArgumentParser(
        prog="ces",
        description="Calibrate-emulate-sample pipeline over a run directory.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True,
                       help="TOML configuration file")
        p.add_argument("--run", default=None,
                       help="run directory (default: $CES_RUN_DIR)")
        if name not in ("generate-truth", "report"):
            p.add_argument("--realization", type=int, default=None,
                           help="single data realization (default: all)")
    return parser


def main(argv=None):
    threads = os.environ.get("CES_THREADS")
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    args = _parser().parse_args(argv)
    run_dir = args.run or os.environ.get("CES_RUN_DIR")
    if not run_dir:
        print("error: no run directory (pass --run or set CES_RUN_DIR)",
              file=sys.stderr)
        return 2

    from .config import load_config
    from .exceptions import ConfigError, DependencyError, DomainError, \
        NumericalError
    from .pipeline import run_stage

    try:
        config = load_config(args.config)
        message = run_stage(args.command, config, run_dir,
                            realization=getattr(args, "realization", None))
    except (ConfigError, DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except DependencyError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
