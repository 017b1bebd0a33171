"""Disparity estimation pipelines.

`match` runs cost volume construction, aggregation and readout for the left
and the right reference view, then invalidates pixels that fail the
left-right check. A texture floor (`min_texture`) is available but off by
default. `refine_gd` minimizes the self-supervised reconstruction objective
directly over the disparity field:

    E(d) = sum_ij C_hat_ij(d) + lambda * sum huber(grad d)

where C_hat is the ASW-aggregated per-pixel cost of reconstructing the
reference from the warped source. LCN statistics are computed once from the
input images and stay fixed, so the gradient flows through the sampler only.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple
import logging
import time

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from app.core.config import settings
from app.core.errors import InvalidParameterError, check_same_shape
from app.services.costvolume import (
    VolumeConfig,
    aggregation_guide,
    build_volume,
    soft_argmin,
    wta_subpixel,
)
from app.services.imgcore import Image, as_image, local_stats
from app.services.invalidation import lr_check
from app.services.lcnloss import (
    CostMap,
    CostTerms,
    SupportWindow,
    asw_adjoint,
    asw_aggregate,
    prepare_terms,
)
from app.services.warp import DisparityMap, sample_cells, warp_grad, warp_scanline

logger = logging.getLogger(__name__)


# Configuration models
class ReadoutConfig(BaseModel):
    kind: Literal["wta_subpixel", "soft_argmin"] = "wta_subpixel"
    temperature: float = Field(default=settings.SOFTMAX_TEMPERATURE, gt=0)


class RefinementConfig(BaseModel):
    kind: Literal["off", "gd"] = "off"
    steps: int = Field(default=settings.REFINE_STEPS, ge=0)
    learning_rate: float = Field(default=settings.REFINE_LEARNING_RATE, gt=0)
    max_step: float = Field(default=settings.REFINE_MAX_STEP, gt=0)
    schedule: Literal["fixed", "graduated"] = "fixed"
    schedule_start: int = Field(default=settings.REFINE_SCHEDULE_START, ge=2)  # full window 2k
    schedule_step: int = Field(default=settings.REFINE_SCHEDULE_STEP, ge=1)
    smoothness: float = Field(default=0.0, ge=0)
    huber_delta: float = Field(default=settings.HUBER_DELTA, gt=0)
    patience: int = Field(default=settings.REFINE_PATIENCE, ge=1)
    rms_decay: float = Field(default=settings.REFINE_RMS_DECAY, ge=0, lt=1)


class MatchConfig(VolumeConfig):
    d_min: int = Field(default=settings.DISPARITY_MIN, ge=0)
    d_max: int = Field(default=settings.DISPARITY_MAX, ge=1)
    readout: ReadoutConfig = ReadoutConfig()
    refinement: RefinementConfig = RefinementConfig()
    lr_theta: float = Field(default=settings.LR_THETA, gt=0)
    lr_sampling: Literal["bilinear", "nearest"] = settings.LR_SAMPLING
    min_texture: float = Field(default=settings.MIN_TEXTURE, ge=0)

    @model_validator(mode="after")
    def valid_range(self):
        if self.d_max <= self.d_min:
            raise ValueError(f"d_max ({self.d_max}) must exceed d_min ({self.d_min})")
        return self


@dataclass
class RefinementResult:
    disparity: DisparityMap
    objective_init: float
    objective_best: float
    trace: pd.DataFrame


@dataclass
class MatchResult:
    disp_left: DisparityMap
    disp_right: DisparityMap
    valid: np.ndarray
    degenerate: bool = False
    diagnostics: Dict[str, float] = field(default_factory=dict)
    trace: Optional[pd.DataFrame] = None
    # Readouts before LR and texture invalidation
    raw_left: Optional[DisparityMap] = None
    raw_right: Optional[DisparityMap] = None


# Objective
def huber(x: np.ndarray, delta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def huber_grad(x: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(x, -delta, delta)


class ReconstructionObjective:
    """Aggregated reconstruction cost of one reference view plus smoothness

    `loss_mask` restricts both the summed centres and the support pixels.
    A half window k of 0 means the plain per-pixel cost.
    """

    def __init__(
        self,
        terms: CostTerms,
        guide: Image,
        intensity_scale: float,
        sigma_w: float,
        loss_mask: np.ndarray,
        smoothness: float = 0.0,
        huber_delta: float = settings.HUBER_DELTA,
    ):
        check_same_shape(terms.reference, guide, loss_mask, names=("terms", "guide", "loss_mask"))
        self.terms = terms
        self.guide = guide
        self.intensity_scale = intensity_scale
        self.sigma_w = sigma_w
        self.loss_mask = np.asarray(loss_mask, dtype=bool)
        self.smoothness = smoothness
        self.huber_delta = huber_delta
        self._supports: Dict[int, SupportWindow] = {}

    def support(self, k: int) -> SupportWindow:
        if k not in self._supports:
            self._supports[k] = SupportWindow(self.guide, k, self.sigma_w, self.intensity_scale)
        return self._supports[k]

    def _data(self, d: np.ndarray, k: int, with_grad: bool) -> Tuple[float, Optional[np.ndarray]]:
        disparity = DisparityMap(d, np.ones(d.shape, dtype=bool))
        cells = sample_cells(d.shape[1], disparity)
        recon, in_frame = warp_scanline(self.terms.source, disparity, cells)
        support_valid = in_frame & self.loss_mask
        cost = self.terms.cost(recon, support_valid).cost

        if k == 0:
            value = float(cost.sum())
            upstream = support_valid.astype(np.float64)
        else:
            support = self.support(k)
            agg = asw_aggregate(
                CostMap(cost, support_valid), self.guide, k, self.sigma_w, self.intensity_scale
            )
            centres = self.loss_mask & agg.valid
            value = float(agg.cost[centres].sum())
            upstream = None
            if with_grad:
                upstream = asw_adjoint(centres.astype(np.float64), support, support_valid)

        if not with_grad:
            return value, None
        slope = warp_grad(self.terms.source, disparity, cells)
        grad = upstream * self.terms.cost_derivative(recon, slope)
        return value, np.where(support_valid, grad, 0.0)

    def _smooth(self, d: np.ndarray, with_grad: bool) -> Tuple[float, Optional[np.ndarray]]:
        if self.smoothness == 0:
            return 0.0, (np.zeros(d.shape) if with_grad else None)
        gx = d[:, 1:] - d[:, :-1]
        gy = d[1:, :] - d[:-1, :]
        penalty = huber(gx, self.huber_delta).sum() + huber(gy, self.huber_delta).sum()
        value = self.smoothness * float(penalty)
        if not with_grad:
            return value, None
        hx = huber_grad(gx, self.huber_delta)
        hy = huber_grad(gy, self.huber_delta)
        grad = np.zeros(d.shape)
        grad[:, 1:] += hx
        grad[:, :-1] -= hx
        grad[1:, :] += hy
        grad[:-1, :] -= hy
        return value, self.smoothness * grad

    def value(self, d: np.ndarray, k: int) -> float:
        data, _ = self._data(d, k, with_grad=False)
        smooth, _ = self._smooth(d, with_grad=False)
        return data + smooth

    def value_and_grad(self, d: np.ndarray, k: int) -> Tuple[float, np.ndarray]:
        data, g_data = self._data(d, k, with_grad=True)
        smooth, g_smooth = self._smooth(d, with_grad=True)
        return data + smooth, g_data + g_smooth


def window_schedule(cfg: RefinementConfig, k_fixed: int, iteration: int) -> int:
    """Half window at a given iteration

    Graduated: 2k starts at schedule_start and halves every schedule_step
    iterations down to 2, then drops to the single-pixel loss (k = 0).
    """
    if cfg.schedule == "fixed":
        return k_fixed
    full = cfg.schedule_start >> (iteration // cfg.schedule_step)
    return full // 2 if full >= 2 else 0


def _fill_invalid(d: DisparityMap) -> np.ndarray:
    """Invalid pixels take the nearest valid value along their row"""
    if d.valid.all():
        return d.values.copy()
    frame = pd.DataFrame(np.where(d.valid, d.values, np.nan))
    filled = frame.ffill(axis=1).bfill(axis=1)
    fallback = float(np.median(d.values[d.valid]))
    return filled.fillna(fallback).to_numpy(dtype=np.float64)


def build_objective(
    left: Image, right: Image, cfg: MatchConfig, loss_mask: np.ndarray, terms: Optional[CostTerms] = None
) -> ReconstructionObjective:
    if terms is None:
        terms = prepare_terms(cfg.cost, left, right, cfg.lcn_radius, cfg.lcn_eta)
    guide, scale = aggregation_guide(cfg, left, terms)
    return ReconstructionObjective(
        terms,
        guide,
        scale,
        cfg.asw.sigma_w,
        loss_mask,
        smoothness=cfg.refinement.smoothness,
        huber_delta=cfg.refinement.huber_delta,
    )


def learning_rate_at(cfg: RefinementConfig, iteration: int) -> float:
    """Base rate, halved after 3/5 of the steps and quartered after 4/5"""
    if iteration >= 0.8 * cfg.steps:
        return cfg.learning_rate / 4.0
    if iteration >= 0.6 * cfg.steps:
        return cfg.learning_rate / 2.0
    return cfg.learning_rate


def refine_gd(
    left: Image,
    right: Image,
    d_init: DisparityMap,
    cfg: Optional[MatchConfig] = None,
    terms: Optional[CostTerms] = None,
) -> RefinementResult:
    """RMSprop descent on the reconstruction objective, returning the best iterate

    Each pixel divides its gradient by a running RMS of its own gradients,
    so a step moves about `learning_rate` pixels whatever the local contrast.
    Steps are clipped to `max_step`. The best iterate is judged on the
    objective at the reference window (the configured k, or the last stage
    of a graduated schedule).
    """
    cfg = cfg or MatchConfig(refinement=RefinementConfig(kind="gd"))
    rcfg = cfg.refinement
    left = as_image(left, "left")
    right = as_image(right, "right")
    check_same_shape(left, right, d_init.values, names=("left", "right", "d_init"))
    if not d_init.valid.any():
        raise InvalidParameterError("d_init has no valid pixels")

    k_fixed = cfg.asw.k if cfg.aggregation == "asw" else 0
    k_ref = k_fixed if rcfg.schedule == "fixed" else 0
    objective = build_objective(left, right, cfg, d_init.valid, terms)

    start = time.perf_counter()
    d = np.maximum(_fill_invalid(d_init), 0.0)
    best_d = d.copy()
    best_value = objective.value(d, k_ref)
    init_value = best_value
    prev_value = best_value
    rising = 0
    mean_square = np.zeros(d.shape)
    rows: List[Dict] = []

    for it in range(rcfg.steps):
        k = window_schedule(rcfg, k_fixed, it)
        value, grad = objective.value_and_grad(d, k)
        if k != k_ref:
            value = objective.value(d, k_ref)

        if value < best_value:
            best_value, best_d = value, d.copy()
        rising = rising + 1 if value > prev_value else 0
        prev_value = value

        mean_square = rcfg.rms_decay * mean_square + (1.0 - rcfg.rms_decay) * grad * grad
        rms = np.sqrt(mean_square)
        scaled = np.divide(grad, rms, out=np.zeros_like(grad), where=rms > 0)
        step = np.clip(learning_rate_at(rcfg, it) * scaled, -rcfg.max_step, rcfg.max_step)
        rows.append(
            {
                "iteration": it,
                "window": 2 * k,
                "objective": value,
                "max_step": float(np.abs(step).max()),
            }
        )
        if rising >= rcfg.patience:
            logger.warning(
                f"Objective rose for {rising} consecutive steps at iteration {it}, "
                f"stopping with best {best_value:.6g}"
            )
            break
        d = np.maximum(d - step, 0.0)
    else:
        final_value = objective.value(d, k_ref)
        if final_value < best_value:
            best_value, best_d = final_value, d.copy()

    logger.info(
        f"Refinement {len(rows)} steps in {time.perf_counter() - start:.3f}s, "
        f"objective {init_value:.6g} -> {best_value:.6g}"
    )
    trace = pd.DataFrame(rows, columns=["iteration", "window", "objective", "max_step"])
    return RefinementResult(
        disparity=DisparityMap(best_d, d_init.valid.copy()),
        objective_init=init_value,
        objective_best=best_value,
        trace=trace,
    )


# Pipelines
def _readout(vol, cfg: MatchConfig) -> DisparityMap:
    if cfg.readout.kind == "soft_argmin":
        return soft_argmin(vol, cfg.readout.temperature)
    return wta_subpixel(vol)


def _match_reference(
    ref: Image, src: Image, cfg: MatchConfig, threads: int, timings: Dict[str, float], tag: str
) -> Tuple[DisparityMap, Optional[pd.DataFrame]]:
    start = time.perf_counter()
    terms = prepare_terms(cfg.cost, ref, src, cfg.lcn_radius, cfg.lcn_eta)
    vol = build_volume(ref, src, cfg.d_min, cfg.d_max, cfg, threads, terms)
    timings[f"volume_{tag}"] = time.perf_counter() - start

    start = time.perf_counter()
    d = _readout(vol, cfg)
    timings[f"readout_{tag}"] = time.perf_counter() - start

    trace = None
    if cfg.refinement.kind == "gd" and d.valid.any():
        start = time.perf_counter()
        refined = refine_gd(ref, src, d, cfg, terms)
        d, trace = refined.disparity, refined.trace
        timings[f"refine_{tag}"] = time.perf_counter() - start
    return d, trace


def _empty_result(shape: Tuple[int, int], reason: str) -> MatchResult:
    logger.warning(f"Degenerate input: {reason}; returning an empty validity mask")
    none = np.zeros(shape, dtype=bool)
    zeros = np.zeros(shape)
    return MatchResult(
        disp_left=DisparityMap(zeros, none),
        disp_right=DisparityMap(zeros.copy(), none.copy()),
        valid=none.copy(),
        degenerate=True,
    )


def match(left: Image, right: Image, cfg: Optional[MatchConfig] = None, threads: int = 1) -> MatchResult:
    """Left- and right-reference disparity with LR invalidation and an optional texture floor

    The right-reference solution is the left-reference pipeline run on the
    horizontally mirrored, swapped pair and mirrored back.
    """
    cfg = cfg or MatchConfig()
    left = as_image(left, "left")
    right = as_image(right, "right")
    check_same_shape(left, right, names=("left", "right"))
    if np.ptp(left) == 0 or np.ptp(right) == 0:
        return _empty_result(left.shape, "constant input image")

    timings: Dict[str, float] = {}
    d_left, trace = _match_reference(left, right, cfg, threads, timings, "left")
    d_right_m, _ = _match_reference(
        right[:, ::-1].copy(), left[:, ::-1].copy(), cfg, threads, timings, "right"
    )
    d_right = d_right_m.mirrored()

    start = time.perf_counter()
    consistent_left = lr_check(d_left, d_right, cfg.lr_theta, cfg.lr_sampling)
    consistent_right = lr_check(d_right_m, d_left.mirrored(), cfg.lr_theta, cfg.lr_sampling)[:, ::-1]
    valid_left = d_left.valid & consistent_left
    valid_right = d_right.valid & consistent_right
    if cfg.min_texture > 0:
        valid_left &= local_stats(left, cfg.lcn_radius).sigma >= cfg.min_texture
        valid_right &= local_stats(right, cfg.lcn_radius).sigma >= cfg.min_texture
    timings["invalidation"] = time.perf_counter() - start

    logger.info(
        f"Matched {left.shape[1]}x{left.shape[0]} [{cfg.d_min}, {cfg.d_max}] "
        f"{cfg.cost}/{cfg.aggregation}/{cfg.readout.kind}: {valid_left.mean():.1%} valid"
    )
    return MatchResult(
        disp_left=d_left.with_mask(valid_left),
        disp_right=d_right.with_mask(valid_right),
        valid=valid_left,
        diagnostics={"valid_fraction": float(valid_left.mean()), **timings},
        trace=trace,
        raw_left=d_left,
        raw_right=d_right,
    )
