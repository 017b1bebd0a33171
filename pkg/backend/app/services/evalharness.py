"""Quantitative evaluation of disparity maps.

Depth error is measured along each viewing ray against a plane fitted to the
predicted point cloud; bias is the mean absolute error and jitter its
standard deviation. Across distances the bias is expected to follow
eps = delta * Z^2 / (b f).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
import statsmodels.api as sm
from pydantic import BaseModel, Field, field_validator
from sklearn.metrics import r2_score

from app.core.config import settings
from app.core.errors import (
    DegenerateInputError,
    InvalidParameterError,
    UndefinedMetricError,
    check_same_shape,
)
from app.services.geometry import CameraRig
from app.services.imgcore import Image
from app.services.invalidation import ConfidenceMap, mask_ap
from app.services.warp import DisparityMap

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"


@dataclass
class DepthMap:
    values: np.ndarray  # metres, 0 where invalid
    valid: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass
class Plane:
    """n . X = offset with |n| = 1 and offset >= 0"""

    normal: np.ndarray
    offset: float
    inliers: int = 0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if n.shape != (3,) or norm == 0:
            raise InvalidParameterError(f"Invalid plane normal {self.normal}")
        n = n / norm
        offset = float(self.offset) / norm
        if offset < 0:
            n, offset = -n, -offset
        self.normal, self.offset = n, offset

    def residuals(self, points: np.ndarray) -> np.ndarray:
        return points @ self.normal - self.offset

    def depth_along(self, rays: np.ndarray) -> np.ndarray:
        """Depth where rays with unit z component meet the plane (nan if parallel)"""
        denom = rays @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.offset / denom
        return np.where(denom > 1e-12, t, np.nan)


# Geometry helpers
def depth_map(d: DisparityMap, rig: CameraRig) -> DepthMap:
    """Z = b f / d on valid pixels; d <= 0 is invalid"""
    valid = d.valid & (d.values > 0)
    safe = np.where(valid, d.values, 1.0)
    return DepthMap(values=np.where(valid, rig.bf / safe, 0.0), valid=valid)


def pixel_rays(shape: Tuple[int, int], rig: CameraRig) -> np.ndarray:
    """H x W x 3 rays (z = 1) through pixel centres, principal point at the centre"""
    h, w = shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = rig.focal_px
    return np.stack(
        [(jj - (w - 1) / 2.0) / f, (ii - (h - 1) / 2.0) / f, np.ones((h, w))], axis=-1
    )


def backproject(depth: DepthMap, rig: CameraRig, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """N x 3 camera-frame points of the valid (and masked) pixels"""
    keep = depth.valid if mask is None else depth.valid & mask
    rays = pixel_rays(depth.shape, rig)
    return rays[keep] * depth.values[keep][:, None]


# Plane fitting
def _tls_plane(points: np.ndarray) -> Plane:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return Plane(normal=normal, offset=float(normal @ centroid), inliers=len(points))


def fit_plane_robust(
    points: np.ndarray,
    iterations: int = settings.RANSAC_ITERATIONS,
    inlier_tol: float = settings.RANSAC_INLIER_TOL,
    seed: int = settings.RANSAC_SEED,
) -> Plane:
    """Seeded RANSAC with a fixed iteration count, then a TLS refit on the inliers"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise DegenerateInputError(f"Plane fit needs >= 3 points, got shape {points.shape}")
    spread = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-300):
        raise DegenerateInputError("Plane fit input is collinear or coincident")

    rng = np.random.default_rng(seed)
    scale = spread[0]
    best: Optional[Plane] = None
    best_count = -1
    for _ in range(iterations):
        a, b, c = points[rng.choice(len(points), size=3, replace=False)]
        normal = np.cross(b - a, c - a)
        if np.linalg.norm(normal) <= 1e-12 * scale * scale:
            continue
        candidate = Plane(normal=normal, offset=float(normal @ a))
        count = int(np.sum(np.abs(candidate.residuals(points)) < inlier_tol))
        if count > best_count:
            best, best_count = candidate, count

    if best is None:
        raise DegenerateInputError(f"No non-degenerate sample in {iterations} RANSAC iterations")
    inliers = points[np.abs(best.residuals(points)) < inlier_tol]
    if len(inliers) < 3:
        logger.warning(f"Only {len(inliers)} RANSAC inliers, keeping the sampled plane")
        return best
    plane = _tls_plane(inliers)
    logger.debug(f"Plane fit: {len(inliers)}/{len(points)} inliers, offset {plane.offset:.4f} m")
    return plane


# Error statistics
def depth_errors(
    depth: DepthMap, plane: Plane, rig: CameraRig, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Signed depth - plane depth along the ray of every valid pixel"""
    keep = depth.valid if mask is None else depth.valid & mask
    rays = pixel_rays(depth.shape, rig)[keep]
    err = depth.values[keep] - plane.depth_along(rays)
    return err[np.isfinite(err)]


def bias_jitter(
    depth: DepthMap,
    plane: Plane,
    rig: CameraRig,
    mask: Optional[np.ndarray] = None,
    min_pixels: int = settings.MIN_PLANE_PIXELS,
) -> Tuple[float, float]:
    """(mean |error|, std of error) in metres"""
    err = depth_errors(depth, plane, rig, mask)
    if len(err) < min_pixels:
        raise DegenerateInputError(
            f"Bias/jitter needs >= {min_pixels} valid pixels, got {len(err)}"
        )
    return float(np.mean(np.abs(err))), float(np.std(err))


def fit_subpixel_delta(samples: Sequence[Tuple[float, float]], rig: CameraRig) -> Tuple[float, float]:
    """Least-squares delta of eps = delta * Z^2 / (b f) and the R^2 of the fit"""
    arr = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    z, eps = arr[:, 0], arr[:, 1]
    if len(np.unique(z)) < 3:
        raise DegenerateInputError(
            f"Subpixel fit needs >= 3 distinct distances, got {len(np.unique(z))}"
        )
    x = z * z / rig.bf
    delta = float(np.sum(eps * x) / np.sum(x * x))
    r2 = float(r2_score(eps, delta * x))
    return delta, r2


@dataclass(frozen=True)
class QuadraticLaw:
    slope: float
    intercept: float
    r2: float


def quadratic_law(samples: Sequence[Tuple[float, float]]) -> QuadraticLaw:
    """OLS of log(bias) on log(Z); a quadratic law has slope 2"""
    arr = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(arr[:, 0])) < 3:
        raise DegenerateInputError("Log-log fit needs >= 3 distinct distances")
    if np.any(arr <= 0):
        raise DegenerateInputError("Log-log fit needs positive distances and biases")
    model = sm.OLS(np.log(arr[:, 1]), sm.add_constant(np.log(arr[:, 0]))).fit()
    intercept, slope = model.params
    return QuadraticLaw(slope=float(slope), intercept=float(intercept), r2=float(model.rsquared))


def _evaluation_set(
    d_pred: DisparityMap, d_gt: DisparityMap, occlusion: Optional[np.ndarray]
) -> np.ndarray:
    check_same_shape(d_pred.values, d_gt.values, names=("d_pred", "d_gt"))
    keep = d_pred.valid & d_gt.valid
    if occlusion is not None:
        occlusion = np.asarray(occlusion, dtype=bool)
        check_same_shape(occlusion, d_gt.values, names=("occlusion", "d_gt"))
        keep &= ~occlusion
    return keep


def disparity_error_curve(
    d_pred: DisparityMap,
    d_gt: DisparityMap,
    occlusion: Optional[np.ndarray] = None,
    thresholds: Sequence[float] = settings.ERROR_CURVE_THRESHOLDS,
) -> np.ndarray:
    """Fraction of non-occluded valid pixels with |error| < x for every threshold"""
    keep = _evaluation_set(d_pred, d_gt, occlusion)
    if not keep.any():
        raise UndefinedMetricError("Error curve has an empty evaluation set")
    err = np.abs(d_pred.values[keep] - d_gt.values[keep])
    return np.array([np.mean(err < x) for x in thresholds])


def intensity_binned_error(
    ref: Image,
    recon: Image,
    mask: Optional[np.ndarray] = None,
    n_bins: int = settings.INTENSITY_BINS,
) -> pd.DataFrame:
    """Mean |ref - recon| per equal-width bin of the reference intensity over [0, 1]"""
    if n_bins < 2:
        raise InvalidParameterError(f"n_bins must be >= 2, got {n_bins}")
    check_same_shape(ref, recon, names=("ref", "recon"))
    keep = np.ones(ref.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    values = np.clip(ref[keep], 0.0, 1.0)
    bins = np.minimum((values * n_bins).astype(np.intp), n_bins - 1)
    errors = pd.DataFrame({"bin": bins, "abs_error": np.abs(ref[keep] - recon[keep])})
    grouped = errors.groupby("bin")["abs_error"].agg(["mean", "count"])
    grouped = grouped.reindex(range(n_bins))

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return pd.DataFrame(
        {
            "bin_lo": edges[:-1],
            "bin_hi": edges[1:],
            "mean_abs_error": grouped["mean"].fillna(0.0).to_numpy(),
            "count": grouped["count"].fillna(0).astype(int).to_numpy(),
        }
    )


# Reports
class DistanceRow(BaseModel):
    name: str
    z_nominal: Optional[float] = None
    bias_m: Optional[float] = Field(default=None, ge=0)
    jitter_m: Optional[float] = Field(default=None, ge=0)
    n_pixels: int = Field(ge=0)
    coverage: float = Field(ge=0, le=1)
    within_1px: Optional[float] = None


class CurvePoint(BaseModel):
    threshold_px: float
    fraction: float = Field(ge=0, le=1)


class EvalReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    rows: List[DistanceRow] = []
    delta_px: Optional[float] = None
    fit_r2: Optional[float] = None
    loglog_slope: Optional[float] = None
    error_curve: List[CurvePoint] = []
    ap: Dict[str, Dict[str, float]] = {}
    ransac_seed: int = settings.RANSAC_SEED
    config: Dict = {}

    @field_validator("error_curve")
    @classmethod
    def monotone_curve(cls, v):
        fractions = [p.fraction for p in v]
        if any(b < a for a, b in zip(fractions, fractions[1:])):
            raise ValueError("error curve fractions must be non-decreasing")
        return v

    def bias_table(self) -> pd.DataFrame:
        rows = [r for r in self.rows if r.z_nominal is not None and r.bias_m is not None]
        return pd.DataFrame(
            {
                "name": [r.name for r in rows],
                "z_m": [r.z_nominal for r in rows],
                "bias_m": [r.bias_m for r in rows],
                "jitter_m": [r.jitter_m for r in rows],
            }
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.bias_table().to_csv(path, index=False)
        return path


@dataclass
class PairEvaluation:
    row: DistanceRow
    within_counts: np.ndarray
    n_eval: int
    ap: Dict[str, float] = field(default_factory=dict)


def evaluate_pair(
    d_pred: DisparityMap,
    d_gt: DisparityMap,
    rig: CameraRig,
    occlusion: Optional[np.ndarray] = None,
    name: str = "pair",
    z_nominal: Optional[float] = None,
    fit_plane: bool = True,
    confidences: Optional[Dict[str, ConfidenceMap]] = None,
    thresholds: Sequence[float] = settings.ERROR_CURVE_THRESHOLDS,
    seed: int = settings.RANSAC_SEED,
) -> PairEvaluation:
    """Bias, jitter, error-curve counts and confidence APs for one scene"""
    keep = _evaluation_set(d_pred, d_gt, occlusion)
    n_eval = int(keep.sum())
    candidates = d_gt.valid if occlusion is None else d_gt.valid & ~np.asarray(occlusion, bool)
    coverage = n_eval / max(int(candidates.sum()), 1)

    within = np.zeros(len(thresholds), dtype=int)
    within_1px = None
    if n_eval:
        curve = disparity_error_curve(d_pred, d_gt, occlusion, thresholds)
        within = np.round(curve * n_eval).astype(int)
        within_1px = float(disparity_error_curve(d_pred, d_gt, occlusion, (1.0,))[0])
    row = DistanceRow(
        name=name,
        z_nominal=z_nominal,
        n_pixels=n_eval,
        coverage=coverage,
        within_1px=within_1px,
    )

    if fit_plane:
        depth = depth_map(d_pred, rig)
        points = backproject(depth, rig, keep)
        if len(points) >= settings.MIN_PLANE_PIXELS:
            plane = fit_plane_robust(points, seed=seed)
            row.bias_m, row.jitter_m = bias_jitter(depth, plane, rig, keep)
        else:
            logger.warning(f"{name}: {len(points)} valid pixels, skipping the plane fit")

    ap: Dict[str, float] = {}
    if confidences and occlusion is not None and np.any(occlusion):
        for label, conf in confidences.items():
            ap[label] = mask_ap(conf, occlusion)

    logger.info(
        f"Evaluated {name}: {n_eval} px, coverage {coverage:.1%}, "
        f"bias {row.bias_m if row.bias_m is not None else float('nan'):.5f} m"
    )
    return PairEvaluation(row=row, within_counts=within, n_eval=n_eval, ap=ap)


def build_report(
    evaluations: Sequence[PairEvaluation],
    rig: CameraRig,
    thresholds: Sequence[float] = settings.ERROR_CURVE_THRESHOLDS,
    config: Optional[Dict] = None,
    seed: int = settings.RANSAC_SEED,
) -> EvalReport:
    """Pool per-scene evaluations into one report, fitting delta when possible"""
    report = EvalReport(
        rows=[e.row for e in evaluations],
        ap={e.row.name: e.ap for e in evaluations if e.ap},
        ransac_seed=seed,
        config=config or {},
    )

    total = sum(e.n_eval for e in evaluations)
    if total:
        counts = np.sum([e.within_counts for e in evaluations], axis=0)
        report.error_curve = [
            CurvePoint(threshold_px=float(x), fraction=float(c) / total)
            for x, c in zip(thresholds, counts)
        ]

    samples = [
        (r.z_nominal, r.bias_m)
        for r in report.rows
        if r.z_nominal is not None and r.bias_m is not None
    ]
    if len({z for z, _ in samples}) >= 3:
        report.delta_px, report.fit_r2 = fit_subpixel_delta(samples, rig)
        if all(b > 0 for _, b in samples):
            report.loglog_slope = quadratic_law(samples).slope
        logger.info(f"Fitted delta {report.delta_px:.4f} px, R^2 {report.fit_r2:.3f}")
    return report
