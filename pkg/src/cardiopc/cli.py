"""Command line entry point.

Logs go to stderr; data artifacts go to files under the run directory; the
only stdout output is the --print-config dump. Exit codes: 0 success,
2 configuration error, 3 missing/incompatible input, 4 numerical or stage
failure.
"""
from __future__ import annotations

import os
import sys


def _pin_blas_threads() -> None:
    # must run before numpy initializes its BLAS thread pools, so this module
    # imports the numeric stack only after setting the environment
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, "1")


_pin_blas_threads()

import argparse  # noqa: E402
import logging  # noqa: E402

from . import pipeline  # noqa: E402
from .config import dump_config, load_config  # noqa: E402
from .errors import (  # noqa: E402
    CardioPCError,
    CompatibilityError,
    ConfigError,
    InvalidSampleError,
    MissingInputError,
    PairingError,
    StageFailure,
)

log = logging.getLogger("cardiopc")

_COMMANDS = {
    "gen-data": pipeline.cmd_gen_data,
    "train": pipeline.cmd_train,
    "reconstruct": pipeline.cmd_reconstruct,
    "mesh": pipeline.cmd_mesh,
    "evaluate": pipeline.cmd_evaluate,
    "full": pipeline.cmd_full,
}

# stages safe to parallelize; the rest run single-thread regardless
_THREADABLE = {"gen-data", "mesh", "evaluate", "full"}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (CompatibilityError, MissingInputError, PairingError,
                        InvalidSampleError, OSError)):
        return 3
    return 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiopc",
        description="Reconstruct dense biventricular surfaces from sparse, "
                    "misaligned contour stacks.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="INI run configuration; omitted means defaults")
    parser.add_argument("--seed", type=int, default=None,
                        help="override [run] seed")
    parser.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads for data generation, meshing "
                             "and evaluation")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="override [run] out_dir")
    parser.add_argument("--print-config", action="store_true",
                        help="dump the effective configuration to stdout "
                             "and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return 0
    threads = args.threads
    if threads > 1 and args.command not in _THREADABLE:
        log.warning("%s runs single-thread; ignoring --threads %d",
                    args.command, threads)
        threads = 1
    try:
        _COMMANDS[args.command](cfg, config_path=args.config, threads=threads)
    except (CardioPCError, OSError) as exc:
        if isinstance(exc, StageFailure):
            log.error("stage %s failed: %s", exc.stage, exc.cause)
        else:
            log.error("%s", exc)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
