"""bench: per-stage timings at a fixed size for several thread counts."""

from pathlib import Path
from typing import Dict, List, Optional
import argparse
import logging
import time

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.cli.options import add_match_overrides, load_match_config, parse_int_list
from app.core.config import settings
from app.core.storage import ensure_directory, write_model
from app.services.costvolume import aggregation_guide, build_volume, wta_subpixel
from app.services.invalidation import lr_check
from app.services.lcnloss import prepare_terms
from app.services.matcher import MatchConfig, match
from app.services.synthgen import render_pair, wall_scene

logger = logging.getLogger(__name__)


# Pydantic models
class BenchRequest(BaseModel):
    width: int = Field(default=settings.BENCH_WIDTH, ge=8)
    height: int = Field(default=settings.BENCH_HEIGHT, ge=8)
    threads: List[int] = [1, 4]
    config: MatchConfig
    budget_seconds: float = settings.BENCH_BUDGET_SECONDS


class BenchRow(BaseModel):
    threads: int
    lcn: float
    volume: float
    readout: float
    lr_check: float
    match_total: float


class BenchReport(BaseModel):
    width: int
    height: int
    disparities: int
    rows: List[BenchRow]
    volume_speedup: Optional[float] = None
    bit_identical: bool
    within_budget: bool


# Helper functions
def time_stages(left: np.ndarray, right: np.ndarray, cfg: MatchConfig, threads: int):
    """Stage timings plus the full match result for one thread count"""
    timings: Dict[str, float] = {}
    start = time.perf_counter()
    terms = prepare_terms(cfg.cost, left, right, cfg.lcn_radius, cfg.lcn_eta)
    aggregation_guide(cfg, left, terms)
    timings["lcn"] = time.perf_counter() - start

    start = time.perf_counter()
    vol = build_volume(left, right, cfg.d_min, cfg.d_max, cfg, threads, terms)
    timings["volume"] = time.perf_counter() - start

    start = time.perf_counter()
    d = wta_subpixel(vol)
    timings["readout"] = time.perf_counter() - start

    start = time.perf_counter()
    lr_check(d, d, cfg.lr_theta, cfg.lr_sampling)
    timings["lr_check"] = time.perf_counter() - start

    start = time.perf_counter()
    result = match(left, right, cfg, threads=threads)
    timings["match_total"] = time.perf_counter() - start
    return timings, result


def run_bench(request: BenchRequest) -> BenchReport:
    cfg = request.config
    spec = wall_scene(
        2.0, width=request.width, height=request.height, d_max=float(cfg.d_max)
    )
    pair = render_pair(spec)

    rows, outputs = [], []
    for threads in request.threads:
        timings, result = time_stages(pair.left, pair.right, cfg, threads)
        rows.append(BenchRow(threads=threads, **timings))
        outputs.append(result)
        logger.info(f"threads={threads}: match {timings['match_total']:.3f}s")

    reference = outputs[0]
    identical = all(
        np.array_equal(r.disp_left.values, reference.disp_left.values)
        and np.array_equal(r.valid, reference.valid)
        for r in outputs[1:]
    )
    speedup = None
    if len(rows) > 1 and rows[-1].volume > 0:
        speedup = rows[0].volume / rows[-1].volume

    single = [r for r in rows if r.threads == 1]
    within = single[0].match_total < request.budget_seconds if single else True
    if not within:
        logger.warning(
            f"Single-thread match took {single[0].match_total:.2f}s, "
            f"over the {request.budget_seconds:.1f}s budget"
        )
    if not identical:
        logger.error("Outputs differ across thread counts")

    return BenchReport(
        width=request.width,
        height=request.height,
        disparities=cfg.d_max - cfg.d_min + 1,
        rows=rows,
        volume_speedup=speedup,
        bit_identical=identical,
        within_budget=within,
    )


def run(args: argparse.Namespace) -> int:
    if args.d_max is None:
        args.d_max = (args.d_min or 0) + settings.BENCH_DISPARITIES - 1
    request = BenchRequest(
        width=args.width,
        height=args.height,
        threads=parse_int_list(args.threads),
        config=load_match_config(args),
    )
    report = run_bench(request)

    table = pd.DataFrame([r.model_dump() for r in report.rows]).set_index("threads")
    print(table.to_string(float_format=lambda v: f"{v:.3f}"))
    if report.volume_speedup is not None:
        print(f"volume speedup x{report.volume_speedup:.2f}, bit-identical: {report.bit_identical}")
    if args.out is not None:
        ensure_directory(Path(args.out).parent)
        write_model(args.out, report)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("bench", help="time each stage at a fixed image size")
    parser.add_argument("--width", type=int, default=settings.BENCH_WIDTH)
    parser.add_argument("--height", type=int, default=settings.BENCH_HEIGHT)
    parser.add_argument("--threads", default="1,4", help="comma-separated thread counts")
    parser.add_argument("--out", type=Path, help="optional JSON timing report")
    add_match_overrides(parser)
    parser.set_defaults(handler=run)
