"""Argument helpers shared by the subcommands."""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import argparse
import json
import logging

from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import InvalidParameterError, MalformedFileError
from app.core.storage import io_errors
from app.services.matcher import MatchConfig

logger = logging.getLogger(__name__)


def add_threads(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--threads", type=int, default=settings.THREADS, help="worker threads (output is identical)"
    )


def add_match_overrides(parser: argparse.ArgumentParser) -> None:
    """Flags that override values of a MatchConfig file"""
    parser.add_argument("--config", type=Path, help="MatchConfig JSON file")
    parser.add_argument("--cost", choices=["photometric", "lcn", "wlcn"])
    parser.add_argument("--aggregation", choices=["none", "asw"])
    parser.add_argument("--asw-k", type=int, dest="asw_k", help="ASW half window k")
    parser.add_argument("--asw-mode", choices=["exact", "separable"], dest="asw_mode")
    parser.add_argument("--readout", choices=["wta_subpixel", "soft_argmin"])
    parser.add_argument("--d-min", type=int, dest="d_min")
    parser.add_argument("--d-max", type=int, dest="d_max")
    parser.add_argument("--refine-steps", type=int, dest="refine_steps", help="enable gd refinement")
    parser.add_argument("--lr-theta", type=float, dest="lr_theta")


def _set_path(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def load_match_config(args: argparse.Namespace) -> MatchConfig:
    """Settings defaults < config file < command-line flags"""
    data: Dict[str, Any] = {}
    if getattr(args, "config", None):
        with io_errors(args.config, "read"):
            text = Path(args.config).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise MalformedFileError(f"{args.config}: {str(e)}")

    overrides = {
        "cost": args.cost,
        "aggregation": args.aggregation,
        "asw.k": args.asw_k,
        "asw.mode": args.asw_mode,
        "readout.kind": args.readout,
        "d_min": args.d_min,
        "d_max": args.d_max,
        "lr_theta": args.lr_theta,
    }
    if args.refine_steps is not None:
        overrides["refinement.kind"] = "gd"
        overrides["refinement.steps"] = args.refine_steps
    for key, value in overrides.items():
        if value is not None:
            _set_path(data, key, value)

    try:
        return MatchConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise InvalidParameterError(f"Invalid match config at {where}: {first['msg']}")


def parse_pixels(values: Optional[List[str]]) -> List[Tuple[int, int]]:
    """'row,col' strings to tuples"""
    pixels = []
    for value in values or []:
        try:
            row, col = (int(v) for v in value.split(","))
        except ValueError:
            raise InvalidParameterError(f"Pixel '{value}' is not of the form row,col")
        pixels.append((row, col))
    return pixels


def parse_int_list(value: str) -> List[int]:
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise InvalidParameterError(f"'{value}' is not a comma-separated list of integers")
    if not items or any(v < 1 for v in items):
        raise InvalidParameterError(f"'{value}' must list positive integers")
    return items
