import argparse
import contextlib
import json
import logging
import os
import sys
from typing import ContextManager, Optional, Sequence

from threadpoolctl import threadpool_limits

from datamodels import (
    AnyADError,
    ConfigurationError,
    ContractError,
    NonFiniteError,
    ParseError,
    ShapeError,
    UndefinedMetricError,
    VerificationError,
)

logger = logging.getLogger(__name__)

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class UsageError(AnyADError):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    from commands import register_all_commands

    parser = _Parser(prog="anyad", description="Any-modality anomaly detection")
    subparsers = parser.add_subparsers(dest="command", metavar="{synth,ingest,stats,train,eval,infer,verify}")
    subparsers.required = True
    register_all_commands(subparsers)
    return parser


def pin_threads(threads: Optional[int]) -> None:
    """Set the thread env vars; BLAS reads them once, when numpy loads."""
    if threads is None:
        return
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    for var in THREAD_VARS:
        os.environ[var] = str(threads)


def thread_limits(threads: Optional[int]) -> ContextManager:
    """
    Pin the BLAS and OpenMP pools for the duration of a command.

    Works after numpy is loaded, so run() called in-process is pinned too.
    """
    pin_threads(threads)
    if threads is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def configure_logging(debug: bool) -> None:
    level = logging.DEBUG if debug else os.getenv("ANYAD_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format="[%(asctime)s] [%(levelname)s] - %(message)s",
        stream=sys.stderr,
        force=True,
    )


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, VerificationError):
        return EXIT_VERIFY
    if isinstance(error, (ParseError, ShapeError, UndefinedMetricError, NonFiniteError, OSError)):
        return EXIT_DATA
    if isinstance(error, (UsageError, ConfigurationError, ContractError)):
        return EXIT_USAGE
    return EXIT_DATA


# ============================================================================
# Entry point
# ============================================================================


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, dispatch to the subcommand handler and map failures to exit codes.

    Returns:
        0 on success, 1 usage or configuration error, 2 data or parse error,
        3 verification failure
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    configure_logging(args.debug)
    from tensorgrad import precision

    try:
        scope = precision("f64") if args.verify_f64 else contextlib.nullcontext()
        with thread_limits(args.threads), scope:
            result = args.handler(args)
    except (AnyADError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)

    print(json.dumps({"command": args.command, **result}, sort_keys=True, default=str))
    return EXIT_OK


def _threads_from_argv(argv: Sequence[str]) -> Optional[int]:
    for i, token in enumerate(argv):
        value = None
        if token == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif token.startswith("--threads="):
            value = token.split("=", 1)[1]
        if value is not None:
            try:
                return int(value)
            except ValueError:
                return None
    return None


if __name__ == "__main__":
    # BLAS reads its thread count once, at import
    threads = _threads_from_argv(sys.argv[1:])
    if threads is not None and threads >= 1:
        pin_threads(threads)
    sys.exit(run(sys.argv[1:]))
