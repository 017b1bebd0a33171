"""Left-right consistency, confidence scores and occlusion-mask average precision."""

from dataclasses import dataclass
from typing import Literal, Optional, Tuple
import logging

import numpy as np
from sklearn.metrics import average_precision_score, precision_recall_curve

from app.core.config import settings
from app.core.errors import (
    InvalidParameterError,
    UndefinedMetricError,
    check_same_shape,
)
from app.services.imgcore import Image
from app.services.warp import DisparityMap, sample_cells

logger = logging.getLogger(__name__)

Sampling = Literal["bilinear", "nearest"]


@dataclass
class ConfidenceMap:
    """Per-pixel score, higher means more likely invalid"""

    scores: np.ndarray
    threshold: float

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise InvalidParameterError("confidence scores must be finite")

    def binarize(self) -> np.ndarray:
        """True where the pixel is flagged invalid"""
        return self.scores >= self.threshold


def _sample_right(
    d_left: DisparityMap, d_right: DisparityMap, sampling: Sampling
) -> Tuple[np.ndarray, np.ndarray]:
    """d_r(i, j - d_l(i, j)) and whether it could be sampled"""
    check_same_shape(d_left.values, d_right.values, names=("d_left", "d_right"))
    h, w = d_left.shape
    rows = np.arange(h)[:, None]
    cells = sample_cells(w, d_left)

    if sampling == "nearest":
        x = np.arange(w)[None, :] - d_left.values
        idx = np.clip(np.floor(x + 0.5), 0, w - 1).astype(np.intp)
        sampled = d_right.values[rows, idx]
        ok = cells.mask & d_right.valid[rows, idx]
        return sampled, ok
    if sampling != "bilinear":
        raise InvalidParameterError(f"Unknown LR sampling '{sampling}'")

    lo = d_right.values[rows, cells.left]
    hi = d_right.values[rows, cells.right]
    sampled = (1.0 - cells.alpha) * lo + cells.alpha * hi
    lo_ok = d_right.valid[rows, cells.left] | (cells.alpha == 1.0)
    hi_ok = d_right.valid[rows, cells.right] | (cells.alpha == 0.0)
    return sampled, cells.mask & lo_ok & hi_ok


def lr_check(
    d_left: DisparityMap,
    d_right: DisparityMap,
    theta: float = settings.LR_THETA,
    sampling: Sampling = settings.LR_SAMPLING,
) -> np.ndarray:
    """Valid iff |d_l(i,j) - d_r(i, j - d_l(i,j))| < theta; out of bounds is invalid"""
    if not theta > 0:
        raise InvalidParameterError(f"theta must be > 0, got {theta}")
    sampled, ok = _sample_right(d_left, d_right, sampling)
    return ok & (np.abs(d_left.values - sampled) < theta)


def lr_residual(
    d_left: DisparityMap,
    d_right: DisparityMap,
    sampling: Sampling = settings.LR_SAMPLING,
    threshold: float = settings.LR_THETA,
) -> ConfidenceMap:
    """Consistency residual as a confidence score

    Pixels that cannot be checked get the largest observed residual + 1.
    """
    sampled, ok = _sample_right(d_left, d_right, sampling)
    residual = np.abs(d_left.values - sampled)
    ceiling = (residual[ok].max() if ok.any() else 0.0) + 1.0
    return ConfidenceMap(np.where(ok, residual, ceiling), threshold)


def photometric_confidence(
    ref: Image, recon: Image, threshold: float = 0.1
) -> ConfidenceMap:
    """Photometric reconstruction error as a confidence score"""
    check_same_shape(ref, recon, names=("ref", "recon"))
    return ConfidenceMap(np.abs(np.asarray(ref) - np.asarray(recon)), threshold)


def _flatten(scores: ConfidenceMap, gt_occluded: np.ndarray, region: Optional[np.ndarray]):
    gt = np.asarray(gt_occluded, dtype=bool)
    check_same_shape(scores.scores, gt, names=("scores", "gt_occluded"))
    if region is not None:
        region = np.asarray(region, dtype=bool)
        return scores.scores[region], gt[region]
    return scores.scores.ravel(), gt.ravel()


def mask_ap(
    scores: ConfidenceMap, gt_occluded: np.ndarray, region: Optional[np.ndarray] = None
) -> float:
    """Average precision of the scores ranking occluded pixels first

    Pixels are pooled; precision is taken step-wise at every distinct
    threshold, AP = sum (R_n - R_{n-1}) P_n.
    """
    y_score, y_true = _flatten(scores, gt_occluded, region)
    if not y_true.any():
        raise UndefinedMetricError("AP is undefined without positive ground-truth pixels")
    return float(average_precision_score(y_true, y_score))


def precision_recall(
    scores: ConfidenceMap, gt_occluded: np.ndarray, region: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and thresholds of the score sweep"""
    y_score, y_true = _flatten(scores, gt_occluded, region)
    if not y_true.any():
        raise UndefinedMetricError("PR curve is undefined without positive ground-truth pixels")
    return precision_recall_curve(y_true, y_score)
