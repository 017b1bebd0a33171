"""Disparity hypothesis volumes and their readouts.

Plane d of a volume holds the (optionally aggregated) cost of warping the
right image by the constant disparity d against the left image. Cells whose
sample falls outside the right image (j < d) are invalid.
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple
from pathlib import Path
import logging
import time

import numpy as np
from pydantic import BaseModel, Field

from app.core.config import settings
from app.core.errors import (
    InvalidParameterError,
    MalformedFileError,
    ShapeMismatchError,
    check_same_shape,
)
from app.core.parallel import map_ordered
from app.core.storage import (
    ensure_directory,
    read_disparity,
    read_model,
    write_disparity,
    write_model,
)
from app.services.imgcore import Image, lcn_normalize
from app.services.lcnloss import (
    CostMap,
    CostTerms,
    asw_aggregate_separable_stack,
    asw_aggregate_stack,
    prepare_terms,
)
from app.services.warp import DisparityMap, shift_constant

logger = logging.getLogger(__name__)


# Configuration models
class AswConfig(BaseModel):
    k: int = Field(default=settings.ASW_HALF_WINDOW, ge=1)
    sigma_w: float = Field(default=settings.ASW_SIGMA_W, gt=0)  # 8-bit units
    guide: Literal["raw", "lcn"] = "raw"
    mode: Literal["exact", "separable"] = settings.ASW_MODE


class VolumeConfig(BaseModel):
    cost: Literal["photometric", "lcn", "wlcn"] = "wlcn"
    aggregation: Literal["none", "asw"] = "asw"
    asw: AswConfig = AswConfig()
    lcn_radius: int = Field(default=settings.LCN_RADIUS, ge=1)
    lcn_eta: float = Field(default=settings.LCN_ETA, gt=0)


@dataclass
class CostVolume:
    d_min: int
    d_max: int
    costs: np.ndarray  # D x H x W
    valid: np.ndarray  # D x H x W

    def __post_init__(self):
        if self.d_max - self.d_min + 1 < 2:
            raise InvalidParameterError(
                f"Cost volume needs at least 2 planes, got [{self.d_min}, {self.d_max}]"
            )
        if self.costs.ndim != 3 or self.costs.shape[0] != self.num_planes:
            raise ShapeMismatchError(
                f"Volume of shape {self.costs.shape} does not hold {self.num_planes} planes"
            )
        check_same_shape(self.costs, self.valid, names=("costs", "valid"))
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def num_planes(self) -> int:
        return self.d_max - self.d_min + 1

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.costs.shape[1]

    @property
    def width(self) -> int:
        return self.costs.shape[2]

    def plane(self, d: int) -> CostMap:
        idx = d - self.d_min
        return CostMap(self.costs[idx].copy(), self.valid[idx].copy())

    def any_valid(self) -> np.ndarray:
        return self.valid.any(axis=0)


@dataclass(frozen=True)
class Landscape:
    row: int
    col: int
    disparities: np.ndarray
    costs: np.ndarray
    valid: np.ndarray

    def best_disparity(self) -> float:
        """Disparity of the lowest valid cost (nan when no plane is valid)"""
        if not self.valid.any():
            return float("nan")
        return float(self.disparities[np.argmin(np.where(self.valid, self.costs, np.inf))])

    def local_minima(self, tolerance: float = 0.05) -> List[int]:
        """Indices of valid local minima within tolerance x (max - min) of the global minimum"""
        costs = np.where(self.valid, self.costs, np.inf)
        if not np.isfinite(costs).any():
            return []
        best = costs.min()
        bound = best + tolerance * (self.costs[self.valid].max() - best)
        minima = []
        for i, c in enumerate(costs):
            if not np.isfinite(c) or c > bound:
                continue
            left = costs[i - 1] if i > 0 else np.inf
            right = costs[i + 1] if i + 1 < len(costs) else np.inf
            if c < left and c <= right:
                minima.append(i)
        return minima


# Construction
def _check_range(d_min: int, d_max: int) -> None:
    if d_min < 0 or d_max <= d_min:
        raise InvalidParameterError(
            f"Invalid disparity range [{d_min}, {d_max}]: need d_max > d_min >= 0"
        )


def _plane_cost(terms: CostTerms, d: int) -> Tuple[np.ndarray, np.ndarray]:
    recon, mask = shift_constant(terms.source, d)
    plane = terms.cost(recon, mask)
    return plane.cost, plane.valid


def build_volume(
    left: Image,
    right: Image,
    d_min: int = settings.DISPARITY_MIN,
    d_max: int = settings.DISPARITY_MAX,
    cfg: Optional[VolumeConfig] = None,
    threads: int = 1,
    terms: Optional[CostTerms] = None,
) -> CostVolume:
    """Cost of every integer disparity hypothesis, left image as reference"""
    cfg = cfg or VolumeConfig()
    _check_range(d_min, d_max)
    if terms is None:
        terms = prepare_terms(cfg.cost, left, right, cfg.lcn_radius, cfg.lcn_eta)
    start = time.perf_counter()

    planes = map_ordered(lambda d: _plane_cost(terms, d), range(d_min, d_max + 1), threads)
    costs = np.stack([p[0] for p in planes])
    valid = np.stack([p[1] for p in planes])

    if cfg.aggregation == "asw":
        guide, scale = aggregation_guide(cfg, left, terms)
        aggregate = (
            asw_aggregate_stack if cfg.asw.mode == "exact" else asw_aggregate_separable_stack
        )
        agg, agg_valid = aggregate(costs, valid, guide, cfg.asw.k, cfg.asw.sigma_w, scale, threads)
        # Out-of-frame cells stay invalid even when their window is not empty
        valid = valid & agg_valid
        costs = np.where(valid, agg, 0.0)

    logger.info(
        f"Built {cfg.cost}/{cfg.aggregation} volume D={d_max - d_min + 1} "
        f"{costs.shape[1]}x{costs.shape[2]} in {time.perf_counter() - start:.3f}s"
    )
    return CostVolume(d_min=d_min, d_max=d_max, costs=costs, valid=valid)


def aggregation_guide(cfg: VolumeConfig, left: Image, terms: CostTerms) -> Tuple[Image, float]:
    """Guide image and intensity scale for the ASW weights"""
    if cfg.asw.guide == "lcn":
        if terms.ref_stats is None:
            guide, _ = lcn_normalize(left, cfg.lcn_eta, cfg.lcn_radius)
            return guide, 1.0
        return terms.reference, 1.0
    return np.asarray(left, dtype=np.float64), settings.ASW_INTENSITY_SCALE


# Readouts
def _softmax(vol: CostVolume, temperature: float) -> Tuple[np.ndarray, np.ndarray]:
    if not temperature > 0:
        raise InvalidParameterError(f"temperature must be > 0, got {temperature}")
    logits = np.where(vol.valid, -vol.costs / temperature, -np.inf)
    any_valid = vol.any_valid()
    peak = np.where(any_valid, logits.max(axis=0), 0.0)
    e = np.where(vol.valid, np.exp(logits - peak[None]), 0.0)
    total = e.sum(axis=0)
    p = np.divide(e, total[None], out=np.zeros_like(e), where=any_valid[None])
    return p, any_valid


def soft_argmin(vol: CostVolume, temperature: float = settings.SOFTMAX_TEMPERATURE) -> DisparityMap:
    """Expected disparity under softmax(-C / temperature) over valid planes"""
    p, any_valid = _softmax(vol, temperature)
    d = np.tensordot(vol.disparities, p, axes=(0, 0))
    d = np.clip(d, vol.d_min, vol.d_max)
    return DisparityMap(np.where(any_valid, d, 0.0), any_valid)


def soft_argmin_grad(vol: CostVolume, temperature: float = settings.SOFTMAX_TEMPERATURE) -> np.ndarray:
    """Per-cell derivative d d* / d C_d = -(1/T) p_d (d - d*)"""
    p, any_valid = _softmax(vol, temperature)
    d_star = np.tensordot(vol.disparities, p, axes=(0, 0))
    grad = -(1.0 / temperature) * p * (vol.disparities[:, None, None] - d_star[None])
    return np.where(vol.valid & any_valid[None], grad, 0.0)


def wta_subpixel(vol: CostVolume) -> DisparityMap:
    """Winner-take-all with a three-point parabola refinement

    Ties go to the smallest disparity. No refinement at the ends of the
    range, next to invalid planes, or when the curvature is not positive.
    """
    costs = np.where(vol.valid, vol.costs, np.inf)
    any_valid = vol.any_valid()
    best = np.argmin(costs, axis=0)
    D = vol.num_planes

    rows, cols = np.indices(best.shape)
    lo_idx = np.clip(best - 1, 0, D - 1)
    hi_idx = np.clip(best + 1, 0, D - 1)
    c0 = costs[best, rows, cols]
    cm = costs[lo_idx, rows, cols]
    cp = costs[hi_idx, rows, cols]

    interior = (best > 0) & (best < D - 1) & np.isfinite(cm) & np.isfinite(cp) & np.isfinite(c0)
    with np.errstate(invalid="ignore", over="ignore"):
        denom = cm - 2.0 * c0 + cp
    refine = interior & (denom > 0)
    offset = np.zeros(best.shape)
    np.divide(cm - cp, 2.0 * denom, out=offset, where=refine)
    offset = np.clip(offset, -0.5, 0.5)

    d = vol.d_min + best + offset
    return DisparityMap(np.where(any_valid, d, 0.0), any_valid)


def landscape(vol: CostVolume, pixel: Tuple[int, int]) -> Landscape:
    """Cost versus disparity at one pixel"""
    row, col = pixel
    if not (0 <= row < vol.height and 0 <= col < vol.width):
        raise InvalidParameterError(
            f"Pixel ({row}, {col}) outside the {vol.height}x{vol.width} volume"
        )
    return Landscape(
        row=row,
        col=col,
        disparities=vol.disparities,
        costs=vol.costs[:, row, col].copy(),
        valid=vol.valid[:, row, col].copy(),
    )


# Persistence
class VolumeHeader(BaseModel):
    d_min: int
    d_max: int
    height: int
    width: int


def save_volume(vol: CostVolume, directory) -> List[Path]:
    """One PFM per plane (invalid cells +inf) plus volume.json"""
    directory = ensure_directory(directory)
    written = []
    for idx, d in enumerate(range(vol.d_min, vol.d_max + 1)):
        path = directory / f"plane_{d:03d}.pfm"
        written.append(write_disparity(path, vol.costs[idx], vol.valid[idx]))
    header = VolumeHeader(d_min=vol.d_min, d_max=vol.d_max, height=vol.height, width=vol.width)
    written.append(write_model(directory / "volume.json", header))
    return written


def load_volume(directory) -> CostVolume:
    directory = Path(directory)
    header = read_model(directory / "volume.json", VolumeHeader)
    planes = [
        read_disparity(directory / f"plane_{d:03d}.pfm")
        for d in range(header.d_min, header.d_max + 1)
    ]
    costs = np.stack([p[0] for p in planes])
    if costs.shape[1:] != (header.height, header.width):
        raise MalformedFileError(
            f"{directory}: planes of shape {costs.shape[1:]} do not match volume.json"
        )
    return CostVolume(header.d_min, header.d_max, costs, np.stack([p[1] for p in planes]))
