"""evaluate: score predicted disparity against rendered ground truth."""

from pathlib import Path
from typing import Dict, List, Optional, Tuple
import argparse
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.cli.options import add_threads
from app.core.config import STANDARD_SCENE_INFO, settings
from app.core.errors import ShapeMismatchError
from app.core.parallel import map_ordered
from app.core.storage import (
    PairStore,
    ensure_directory,
    io_errors,
    read_disparity,
    write_model,
)
from app.services.evalharness import (
    EvalReport,
    PairEvaluation,
    build_report,
    evaluate_pair,
    intensity_binned_error,
)
from app.services.geometry import CameraRig
from app.services.invalidation import ConfidenceMap, lr_residual, photometric_confidence
from app.services.warp import DisparityMap, warp_scanline

logger = logging.getLogger(__name__)


# Pydantic models
class EvalRequest(BaseModel):
    pred: Path
    gt: Path
    out: Path
    csv: Optional[Path] = None
    binned_csv: Optional[Path] = None
    threads: int = 1
    seed: int = settings.RANSAC_SEED


class SceneInfo(BaseModel):
    name: str
    rig: CameraRig
    z_nominal: Optional[float] = None
    planar: bool = True


# Helper functions
def scene_info(store: PairStore) -> SceneInfo:
    """Name, rig and nominal distance from scene.json, defaults otherwise"""
    default_rig = CameraRig(
        focal_px=STANDARD_SCENE_INFO["focal_px"], baseline_m=STANDARD_SCENE_INFO["baseline_m"]
    )
    scene = store.load_scene_json()
    if scene is None:
        return SceneInfo(name=store.directory.name, rig=default_rig)

    name = scene.get("name", store.directory.name)
    rig = CameraRig(**scene["rig"]) if "rig" in scene else default_rig
    z_nominal = None
    if name.startswith("wall:"):
        z_nominal = float(name.split(":", 1)[1])
    planar = not any(p.get("kind") == "box" for p in scene.get("primitives", []))
    planar = planar and name != "textureless"
    return SceneInfo(name=name, rig=rig, z_nominal=z_nominal, planar=planar)


def load_prediction(pred_dir: Path, suffix: str = "") -> Tuple[DisparityMap, DisparityMap]:
    left = DisparityMap(*read_disparity(pred_dir / f"disp_left{suffix}.pfm"))
    right = DisparityMap(*read_disparity(pred_dir / f"disp_right{suffix}.pfm"))
    return left, right


def load_raw_prediction(pred_dir: Path) -> Optional[Tuple[DisparityMap, DisparityMap]]:
    """Readouts before invalidation, when the match run kept them"""
    if not (pred_dir / "disp_left_raw.pfm").exists():
        return None
    return load_prediction(pred_dir, "_raw")


def confidences(
    store: PairStore, d_left: DisparityMap, d_right: DisparityMap
) -> Dict[str, ConfidenceMap]:
    """LR-residual and photometric confidence for occlusion AP

    Both are scored on disparities before invalidation, so every pixel is ranked.
    """
    left, right = store.load_images()
    recon, in_frame = warp_scanline(right, d_left)
    photometric = photometric_confidence(left, recon)
    # Pixels without a reconstruction rank above every reconstructed one
    photometric.scores = np.where(in_frame, photometric.scores, photometric.scores.max() + 1.0)
    return {"lr_residual": lr_residual(d_left, d_right), "photometric": photometric}


def binned_error(
    store: PairStore, d_left: DisparityMap, occlusion: np.ndarray, name: str
) -> pd.DataFrame:
    """Reconstruction error per reference-intensity bin over valid, non-occluded pixels"""
    left, right = store.load_images()
    recon, in_frame = warp_scanline(right, d_left)
    table = intensity_binned_error(left, recon, in_frame & ~occlusion)
    table.insert(0, "name", name)
    return table


def evaluate_scene(
    pred_dir: Path, gt_dir: Path, seed: int
) -> Tuple[SceneInfo, PairEvaluation, pd.DataFrame]:
    store = PairStore(gt_dir)
    info = scene_info(store)
    d_left, d_right = load_prediction(pred_dir)
    raw = load_raw_prediction(pred_dir)
    if raw is None:
        logger.warning(f"No raw disparities in {pred_dir}, ranking occlusions on the final maps")
        raw = (d_left, d_right)
    (gt_values, gt_valid), _, occlusion = store.load_ground_truth()
    gt_left = DisparityMap(gt_values, gt_valid)
    if d_left.shape != gt_left.shape:
        raise ShapeMismatchError(
            f"Prediction {d_left.shape} in {pred_dir} does not match ground truth {gt_left.shape}"
        )

    evaluation = evaluate_pair(
        d_left,
        gt_left,
        info.rig,
        occlusion=occlusion,
        name=info.name,
        z_nominal=info.z_nominal,
        fit_plane=info.planar,
        confidences=confidences(store, *raw),
        seed=seed,
    )
    return info, evaluation, binned_error(store, d_left, occlusion, info.name)


def run_evaluation(request: EvalRequest) -> EvalReport:
    gt_dirs: List[Path] = PairStore.discover(request.gt)
    if gt_dirs == [request.gt]:
        jobs = [(request.pred, request.gt)]
    else:
        jobs = [(request.pred / d.name, d) for d in gt_dirs]

    results = map_ordered(
        lambda job: evaluate_scene(job[0], job[1], request.seed), jobs, request.threads
    )
    rig = results[0][0].rig
    report = build_report(
        [evaluation for _, evaluation, _ in results],
        rig,
        config={"pred": str(request.pred), "gt": str(request.gt)},
        seed=request.seed,
    )

    ensure_directory(request.out.parent)
    write_model(request.out, report)
    if request.csv is not None:
        report.to_csv(request.csv)
    if request.binned_csv is not None:
        ensure_directory(request.binned_csv.parent)
        binned = pd.concat([table for _, _, table in results], ignore_index=True)
        with io_errors(request.binned_csv, "write"):
            binned.to_csv(request.binned_csv, index=False)
    logger.info(f"Wrote report for {len(results)} scene(s) to {request.out}")
    return report


def run(args: argparse.Namespace) -> int:
    request = EvalRequest(
        pred=args.pred,
        gt=args.gt,
        out=args.out,
        csv=args.csv,
        binned_csv=args.binned_csv,
        threads=args.threads,
        seed=args.seed,
    )
    run_evaluation(request)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="score predictions against ground truth")
    parser.add_argument("--pred", type=Path, required=True, help="match output directory")
    parser.add_argument("--gt", type=Path, required=True, help="rendered pair directory")
    parser.add_argument("--out", type=Path, required=True, help="EvalReport JSON path")
    parser.add_argument("--csv", type=Path, help="optional (Z, bias, jitter) CSV")
    parser.add_argument(
        "--binned-csv", type=Path, help="optional reconstruction error per intensity bin CSV"
    )
    parser.add_argument("--seed", type=int, default=settings.RANSAC_SEED, help="RANSAC seed")
    add_threads(parser)
    parser.set_defaults(handler=run)
