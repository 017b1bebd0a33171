"""landscape: cost-versus-disparity curves at chosen pixels."""

from pathlib import Path
from typing import List, Optional, Tuple
import argparse
import logging

import pandas as pd
import plotly.graph_objects as go
from pydantic import BaseModel

from app.cli.options import add_match_overrides, add_threads, load_match_config, parse_pixels
from app.core.errors import InvalidParameterError
from app.core.storage import PairStore, ensure_directory, io_errors, read_disparity
from app.services.costvolume import CostVolume, build_volume, landscape
from app.services.matcher import MatchConfig

logger = logging.getLogger(__name__)


# Pydantic models
class LandscapeRequest(BaseModel):
    pair: Path
    out: Path
    config: MatchConfig
    pixels: List[Tuple[int, int]]
    plot: Optional[Path] = None
    threads: int = 1


# Helper functions
def landscape_table(
    vol: CostVolume, pixels: List[Tuple[int, int]], gt: Optional[Tuple] = None
) -> pd.DataFrame:
    """Long table: one row per (pixel, disparity)"""
    frames = []
    for row, col in pixels:
        curve = landscape(vol, (row, col))
        minima = set(curve.local_minima())
        frame = pd.DataFrame(
            {
                "row": row,
                "col": col,
                "disparity": curve.disparities,
                "cost": curve.costs,
                "valid": curve.valid,
                "local_minimum": [i in minima for i in range(len(curve.costs))],
            }
        )
        if gt is not None:
            values, valid = gt
            frame["gt_disparity"] = values[row, col] if valid[row, col] else float("nan")
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def landscape_figure(table: pd.DataFrame, title: str) -> go.Figure:
    fig = go.Figure()
    for (row, col), curve in table[table["valid"]].groupby(["row", "col"]):
        fig.add_trace(
            go.Scatter(x=curve["disparity"], y=curve["cost"], mode="lines", name=f"({row}, {col})")
        )
    fig.update_layout(title=title, xaxis_title="disparity [px]", yaxis_title="cost")
    return fig


def run_landscape(request: LandscapeRequest) -> pd.DataFrame:
    if not request.pixels:
        raise InvalidParameterError("at least one --pixel row,col is required")
    store = PairStore(request.pair)
    left, right = store.load_images()
    cfg = request.config
    vol = build_volume(left, right, cfg.d_min, cfg.d_max, cfg, request.threads)

    gt_path = store.file("gt_disp_left.pfm")
    gt = read_disparity(gt_path) if gt_path.exists() else None
    table = landscape_table(vol, request.pixels, gt)

    ensure_directory(request.out.parent)
    with io_errors(request.out, "write"):
        table.to_csv(request.out, index=False)
    if request.plot is not None:
        fig = landscape_figure(table, f"{cfg.cost}/{cfg.aggregation} cost landscape")
        with io_errors(request.plot, "write"):
            fig.write_html(str(request.plot))
    logger.info(f"Wrote {len(request.pixels)} cost curves to {request.out}")
    return table


def run(args: argparse.Namespace) -> int:
    request = LandscapeRequest(
        pair=args.pair,
        out=args.out,
        config=load_match_config(args),
        pixels=parse_pixels(args.pixel),
        plot=args.plot,
        threads=args.threads,
    )
    run_landscape(request)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("landscape", help="dump cost curves at selected pixels")
    parser.add_argument("--pair", type=Path, required=True, help="rendered pair directory")
    parser.add_argument("--out", type=Path, required=True, help="output CSV")
    parser.add_argument("--pixel", action="append", help="row,col (repeatable)")
    parser.add_argument("--plot", type=Path, help="optional HTML plot of the curves")
    add_match_overrides(parser)
    add_threads(parser)
    parser.set_defaults(handler=run)
