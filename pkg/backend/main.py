import argparse
import logging
import os
import sys
from typing import List, Optional

# Threads come from --threads; keep BLAS single-threaded underneath them
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from app.cli.commands import COMMANDS  # noqa: E402
from app.core.config import settings  # noqa: E402
from app.core.errors import EXIT_NUMERICAL, LabError, UsageError  # noqa: E402

logger = logging.getLogger("active_stereo_lab")


class LabArgumentParser(argparse.ArgumentParser):
    """argparse reports usage problems as UsageError instead of exiting with 2"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(
        prog="active-stereo-lab",
        description="Synthetic active-stereo rendering, matching and evaluation",
    )
    parser.add_argument("--version", action="version", version=settings.TOOL_VERSION)
    parser.add_argument(
        "--log-level",
        default=settings.LOG_LEVEL,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    # Register commands
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except LabError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code

    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except LabError as e:
        logger.debug(f"{type(e).__name__} in '{args.command}'", exc_info=True)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in '{args.command}': {str(e)}")
        print(f"error: {type(e).__name__}: {str(e)}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
