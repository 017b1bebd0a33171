"""match: estimate left/right disparity for a pair directory."""

from pathlib import Path
from typing import Optional
import argparse
import logging
import time

from pydantic import BaseModel

from app.cli.options import add_match_overrides, add_threads, load_match_config
from app.core.storage import PairStore, RunStore
from app.services.costvolume import build_volume, save_volume
from app.services.matcher import MatchConfig, MatchResult, match

logger = logging.getLogger(__name__)


# Pydantic models
class MatchRequest(BaseModel):
    pair: Path
    out: Path
    config: MatchConfig
    threads: int = 1
    dump_volume: bool = False


class MatchSummary(BaseModel):
    valid_fraction: float
    degenerate: bool
    diagnostics: dict


# Helper functions
def write_result(run: RunStore, result: MatchResult) -> None:
    run.write_disparity("disp_left.pfm", result.disp_left.values, result.disp_left.valid)
    run.write_disparity("disp_right.pfm", result.disp_right.values, result.disp_right.valid)
    run.write_mask("valid.pgm", result.valid)
    if result.raw_left is not None:
        run.write_disparity("disp_left_raw.pfm", result.raw_left.values, result.raw_left.valid)
        run.write_disparity("disp_right_raw.pfm", result.raw_right.values, result.raw_right.valid)
    if result.trace is not None:
        run.write_csv("trace.csv", result.trace)
    run.write_model(
        "summary.json",
        MatchSummary(
            valid_fraction=float(result.valid.mean()),
            degenerate=result.degenerate,
            diagnostics=result.diagnostics,
        ),
    )


def run_match(request: MatchRequest, command: Optional[str] = "match") -> MatchResult:
    left, right = PairStore(request.pair).load_images()
    run = RunStore(request.out, command)
    run.manifest.inputs = {"pair": str(request.pair)}
    run.manifest.config = request.config.model_dump(mode="json")

    start = time.perf_counter()
    result = match(left, right, request.config, threads=request.threads)
    run.manifest.timings["match"] = time.perf_counter() - start
    run.manifest.timings.update(
        {k: v for k, v in result.diagnostics.items() if k != "valid_fraction"}
    )
    write_result(run, result)

    if request.dump_volume:
        vol = build_volume(
            left, right, request.config.d_min, request.config.d_max, request.config, request.threads
        )
        for path in save_volume(vol, run.directory / "volume"):
            run.path(str(path.relative_to(run.directory)))

    if result.degenerate:
        logger.warning(f"Degenerate input in {request.pair}: validity mask is empty")
    run.finish()
    return result


def run(args: argparse.Namespace) -> int:
    config = load_match_config(args)
    pairs = PairStore.discover(args.pair)
    for pair in pairs:
        out = args.out if pair == args.pair else args.out / pair.name
        request = MatchRequest(
            pair=pair,
            out=out,
            config=config,
            threads=args.threads,
            dump_volume=args.dump_volume,
        )
        run_match(request)
    logger.info(f"Matched {len(pairs)} pair(s) into {args.out}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("match", help="estimate disparity for a pair directory")
    parser.add_argument("--pair", type=Path, required=True, help="directory with left.pfm / right.pfm")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument(
        "--dump-volume", action="store_true", dest="dump_volume", help="also write the cost volume"
    )
    add_match_overrides(parser)
    add_threads(parser)
    parser.set_defaults(handler=run)
