"""Per-pixel reconstruction costs and adaptive-support-weight aggregation.

Cost kinds
    photometric  |I_l - I_hat_l|
    lcn          |LCN(I_l) - LCN(I_r) warped|
    wlcn         sigma_l * |LCN(I_l) - LCN(I_r) warped|

The right image is normalized with its own statistics and then warped
(normalize-then-warp), so the terms below depend on the disparity only
through the sampler.

ASW aggregation over the 2k x 2k window [i-k, i+k-1] x [j-k, j+k-1]:

    C_hat_ij = sum w_xy C_xy / sum w_xy,  w_xy = exp(-|I_ij - I_xy| / sigma_w)

sigma_w is given in 8-bit units and divided by `intensity_scale` for [0,1]
data. Invalid or out-of-bounds pixels carry zero weight. asw_aggregate
evaluates every window offset; the separable two-pass version is what cost
volumes use by default.
"""

from dataclasses import dataclass
from typing import Iterator, List, Literal, Optional, Tuple
import logging

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidParameterError, ShapeMismatchError, check_same_shape
from app.core.parallel import chunked, map_ordered
from app.services.imgcore import Image, LocalStats, apply_lcn, as_image, lcn_normalize

logger = logging.getLogger(__name__)

CostKind = Literal["photometric", "lcn", "wlcn"]
COST_KINDS = ("photometric", "lcn", "wlcn")


@dataclass
class CostMap:
    cost: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        check_same_shape(self.cost, self.valid, names=("cost", "valid"))
        self.cost = np.where(self.valid, self.cost, 0.0)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cost.shape

    def total(self) -> float:
        return float(self.cost[self.valid].sum())

    def mean(self) -> float:
        return float(self.cost[self.valid].mean()) if self.valid.any() else 0.0


def _mask_or_full(mask: Optional[np.ndarray], shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeMismatchError(f"mask {mask.shape} does not match image {shape}")
    return mask


# Per-pixel costs
def photometric_cost(ref: Image, recon: Image, mask: Optional[np.ndarray] = None) -> CostMap:
    """L1 photometric residual"""
    check_same_shape(ref, recon, names=("ref", "recon"))
    valid = _mask_or_full(mask, ref.shape)
    return CostMap(np.abs(ref - recon), valid)


def lcn_cost(
    ref: Image, recon_lcn: Image, ref_stats: LocalStats, mask: Optional[np.ndarray] = None
) -> CostMap:
    """Unweighted LCN residual"""
    check_same_shape(ref, recon_lcn, names=("ref", "recon_lcn"))
    valid = _mask_or_full(mask, ref.shape)
    return CostMap(np.abs(apply_lcn(ref, ref_stats) - recon_lcn), valid)


def wlcn_cost(
    ref: Image,
    recon_lcn: Image,
    ref_stats: LocalStats,
    mask: Optional[np.ndarray] = None,
    recon_stats: Optional[LocalStats] = None,
) -> CostMap:
    """LCN residual re-weighted by the reference local standard deviation"""
    check_same_shape(ref, recon_lcn, names=("ref", "recon_lcn"))
    if recon_stats is not None and not ref_stats.compatible_with(recon_stats):
        raise InvalidParameterError(
            f"LCN stats mismatch: reference radius={ref_stats.radius} eta={ref_stats.eta}, "
            f"recon radius={recon_stats.radius} eta={recon_stats.eta}"
        )
    valid = _mask_or_full(mask, ref.shape)
    residual = np.abs(apply_lcn(ref, ref_stats) - recon_lcn)
    return CostMap(ref_stats.sigma * residual, valid)


@dataclass(frozen=True)
class CostTerms:
    """Prepared reference / source representations for one cost kind"""

    kind: str
    image: np.ndarray  # raw reference
    reference: np.ndarray  # what a reconstruction is compared against
    source: np.ndarray
    weight: Optional[np.ndarray]
    ref_stats: Optional[LocalStats] = None
    source_stats: Optional[LocalStats] = None

    def cost(self, recon: np.ndarray, mask: Optional[np.ndarray] = None) -> CostMap:
        """Per-pixel cost of a reconstruction warped from `source`"""
        if self.kind == "photometric":
            return photometric_cost(self.image, recon, mask)
        if self.kind == "lcn":
            return lcn_cost(self.image, recon, self.ref_stats, mask)
        return wlcn_cost(self.image, recon, self.ref_stats, mask, self.source_stats)

    def cost_derivative(self, recon: np.ndarray, recon_grad: np.ndarray) -> np.ndarray:
        """d cost / d d given d recon / d d (sign(0) = 0 at the kink)"""
        grad = np.sign(recon - self.reference) * recon_grad
        return grad if self.weight is None else self.weight * grad


def prepare_terms(
    kind: str,
    left: Image,
    right: Image,
    radius: int = settings.LCN_RADIUS,
    eta: float = settings.LCN_ETA,
) -> CostTerms:
    """Normalize each image independently; the source is what gets warped"""
    left = as_image(left, "left")
    right = as_image(right, "right")
    check_same_shape(left, right, names=("left", "right"))
    if kind == "photometric":
        return CostTerms(kind=kind, image=left, reference=left, source=right, weight=None)
    if kind not in COST_KINDS:
        raise InvalidParameterError(f"Unknown cost kind '{kind}', expected one of {COST_KINDS}")

    left_lcn, left_stats = lcn_normalize(left, eta=eta, radius=radius)
    right_lcn, right_stats = lcn_normalize(right, eta=eta, radius=radius)
    weight = left_stats.sigma if kind == "wlcn" else None
    return CostTerms(
        kind=kind,
        image=left,
        reference=left_lcn,
        source=right_lcn,
        weight=weight,
        ref_stats=left_stats,
        source_stats=right_stats,
    )


# Adaptive support weights
class SupportWindow:
    """Padded guide for enumerating the 2k x 2k window offsets in row-major order"""

    def __init__(self, guide: Image, k: int, sigma_w: float, intensity_scale: float):
        if k < 1:
            raise InvalidParameterError(f"ASW half window k must be >= 1, got {k}")
        if not sigma_w > 0:
            raise InvalidParameterError(f"sigma_w must be > 0, got {sigma_w}")
        self.guide = np.asarray(guide, dtype=np.float64)
        self.k = k
        self.rate = intensity_scale / sigma_w
        self.shape = self.guide.shape
        self.padded_guide = np.pad(self.guide, k, mode="edge")
        self.inside = np.pad(np.ones(self.shape, dtype=bool), k, constant_values=False)

    def offsets(self) -> Iterator[Tuple[int, int]]:
        for dy in range(-self.k, self.k):
            for dx in range(-self.k, self.k):
                yield dy, dx

    def window(self, dy: int, dx: int) -> Tuple[slice, slice]:
        h, w = self.shape
        k = self.k
        return slice(k + dy, k + dy + h), slice(k + dx, k + dx + w)

    def weights(self, dy: int, dx: int) -> np.ndarray:
        """w between every centre and its neighbour at (dy, dx); 0 outside the image"""
        sl = self.window(dy, dx)
        w = np.exp(-self.rate * np.abs(self.guide - self.padded_guide[sl]))
        return np.where(self.inside[sl], w, 0.0)

    def pad(self, arr: np.ndarray) -> np.ndarray:
        pad_width = [(0, 0)] * (arr.ndim - 2) + [(self.k, self.k), (self.k, self.k)]
        return np.pad(arr, pad_width, constant_values=0)


def asw_weights(
    guide: Image,
    dy: int,
    dx: int,
    k: int = settings.ASW_HALF_WINDOW,
    sigma_w: float = settings.ASW_SIGMA_W,
    intensity_scale: float = settings.ASW_INTENSITY_SCALE,
) -> np.ndarray:
    """Weight field between every pixel and its neighbour at offset (dy, dx)"""
    support = SupportWindow(guide, k, sigma_w, intensity_scale)
    if not (-k <= dy < k and -k <= dx < k):
        raise InvalidParameterError(f"Offset ({dy}, {dx}) outside the 2k window for k={k}")
    return support.weights(dy, dx)


def _check_asw_inputs(costs: CostMap, guide: Image):
    check_same_shape(costs.cost, guide, names=("costs", "guide"))


def asw_aggregate(
    costs: CostMap,
    guide: Image,
    k: int = settings.ASW_HALF_WINDOW,
    sigma_w: float = settings.ASW_SIGMA_W,
    intensity_scale: float = settings.ASW_INTENSITY_SCALE,
) -> CostMap:
    """Exact edge-preserving window aggregation of a cost map"""
    _check_asw_inputs(costs, guide)
    support = SupportWindow(guide, k, sigma_w, intensity_scale)
    cost_p = support.pad(costs.cost)
    valid_p = support.pad(costs.valid.astype(np.float64))

    num = np.zeros(costs.shape)
    den = np.zeros(costs.shape)
    for dy, dx in support.offsets():
        sl = support.window(dy, dx)
        wv = support.weights(dy, dx) * valid_p[sl]
        num += wv * cost_p[sl]
        den += wv

    valid = den > 0
    out = np.divide(num, den, out=np.zeros_like(num), where=valid)
    return CostMap(out, valid)


def _aggregate_planes(
    cost: np.ndarray, valid: np.ndarray, support: SupportWindow
) -> Tuple[np.ndarray, np.ndarray]:
    cost_p = support.pad(cost)
    valid_p = support.pad(valid.astype(np.float64))
    num = np.zeros(cost.shape)
    den = np.zeros(cost.shape)
    for dy, dx in support.offsets():
        sl = (slice(None),) + support.window(dy, dx)
        wv = support.weights(dy, dx)[None] * valid_p[sl]
        num += wv * cost_p[sl]
        den += wv
    agg_valid = den > 0
    out = np.divide(num, den, out=np.zeros_like(num), where=agg_valid)
    return out, agg_valid


def asw_aggregate_stack(
    cost: np.ndarray,
    valid: np.ndarray,
    guide: Image,
    k: int = settings.ASW_HALF_WINDOW,
    sigma_w: float = settings.ASW_SIGMA_W,
    intensity_scale: float = settings.ASW_INTENSITY_SCALE,
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """asw_aggregate applied to every plane of a D x H x W stack

    Planes are split across threads; each plane is summed in the same
    row-major offset order as the single-map version.
    """
    if cost.shape[1:] != guide.shape:
        raise ShapeMismatchError(f"stack {cost.shape} does not match guide {guide.shape}")
    support = SupportWindow(guide, k, sigma_w, intensity_scale)
    groups = chunked(range(cost.shape[0]), threads)

    def run(planes):
        idx = np.asarray(planes)
        return _aggregate_planes(cost[idx], valid[idx], support)

    parts = map_ordered(run, groups, threads)
    out = np.concatenate([p[0] for p in parts], axis=0)
    out_valid = np.concatenate([p[1] for p in parts], axis=0)
    return out, out_valid


def asw_normalizer(support: SupportWindow, valid: np.ndarray) -> np.ndarray:
    """sum_xy w_xy over the valid support of every centre"""
    valid_p = support.pad(valid.astype(np.float64))
    den = np.zeros(support.shape)
    for dy, dx in support.offsets():
        den += support.weights(dy, dx) * valid_p[support.window(dy, dx)]
    return den


def asw_adjoint(
    upstream: np.ndarray, support: SupportWindow, valid: np.ndarray
) -> np.ndarray:
    """Transpose of the aggregation: d(sum_ij u_ij C_hat_ij) / d C_xy

    The weights depend on the guide only, so this is the exact derivative
    with respect to the per-pixel costs.
    """
    den = asw_normalizer(support, valid)
    scaled = np.divide(upstream, den, out=np.zeros_like(den), where=den > 0)
    grad_p = np.zeros(support.padded_guide.shape)
    for dy, dx in support.offsets():
        grad_p[support.window(dy, dx)] += support.weights(dy, dx) * scaled
    k = support.k
    h, w = support.shape
    return grad_p[k : k + h, k : k + w] * valid


def _line_blocks(lines: int) -> List[Tuple[int, int]]:
    step = settings.ASW_ROW_BLOCK
    return [(a, min(a + step, lines)) for a in range(0, lines, step)]


def _banded_pass(values: np.ndarray, weights: np.ndarray, k: int, tile: int) -> np.ndarray:
    """out[p, n, x] = sum_o weights[o + k, n, x] * values[p, n, x + o] for o in [-k, k)

    Runs along the last axis with zeros beyond both ends. Every tile of T
    outputs on a line is one (P x (T + 2k)) @ ((T + 2k) x T) banded product.
    """
    lines, length = values.shape[1:]
    padded = np.pad(values, ((0, 0), (0, 0), (k, k)))
    out = np.empty(values.shape)
    for start in range(0, length, tile):
        stop = min(start + tile, length)
        span = stop - start
        cols = np.arange(span)
        band = np.zeros((lines, span + 2 * k, span))
        for o in range(-k, k):
            band[:, cols + o + k, cols] = weights[o + k, :, start:stop]
        source = np.ascontiguousarray(padded[:, :, start : stop + 2 * k].transpose(1, 0, 2))
        out[:, :, start:stop] = np.matmul(source, band).transpose(1, 0, 2)
    return out


def _separable_pass(
    cost: np.ndarray, valid: np.ndarray, weights: np.ndarray, k: int, threads: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized 1D ASW pass along the last axis of a P x N x L stack

    Lines are cut into fixed blocks, so no value depends on the thread count.
    """
    planes = cost.shape[0]
    stacked = np.concatenate([valid * cost, valid])

    def run(block):
        a, b = block
        return _banded_pass(stacked[:, a:b], weights[:, a:b], k, settings.ASW_TILE)

    summed = np.concatenate(map_ordered(run, _line_blocks(cost.shape[1]), threads), axis=1)
    num, den = summed[:planes], summed[planes:]
    agg_valid = den > 0
    return np.divide(num, den, out=np.zeros_like(num), where=agg_valid), agg_valid


def asw_aggregate_separable_stack(
    cost: np.ndarray,
    valid: np.ndarray,
    guide: Image,
    k: int = settings.ASW_HALF_WINDOW,
    sigma_w: float = settings.ASW_SIGMA_W,
    intensity_scale: float = settings.ASW_INTENSITY_SCALE,
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Two-pass approximation of asw_aggregate on a D x H x W stack (rows, then columns)

    Weights in each pass are taken against the pass centre only, so the
    result differs from the exact window wherever the guide varies inside
    the window. Each pass costs O(k) per cell instead of O(k^2).
    """
    if cost.shape[1:] != guide.shape:
        raise ShapeMismatchError(f"stack {cost.shape} does not match guide {guide.shape}")
    support = SupportWindow(guide, k, sigma_w, intensity_scale)
    along_rows = np.stack([support.weights(0, o) for o in range(-k, k)])
    along_cols = np.stack([support.weights(o, 0).T for o in range(-k, k)])

    out, mid_valid = _separable_pass(cost, valid.astype(np.float64), along_rows, k, threads)
    mid_valid = mid_valid.transpose(0, 2, 1).astype(np.float64)
    out, out_valid = _separable_pass(out.transpose(0, 2, 1), mid_valid, along_cols, k, threads)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    return out, np.ascontiguousarray(out_valid.transpose(0, 2, 1))


def asw_aggregate_separable(
    costs: CostMap,
    guide: Image,
    k: int = settings.ASW_HALF_WINDOW,
    sigma_w: float = settings.ASW_SIGMA_W,
    intensity_scale: float = settings.ASW_INTENSITY_SCALE,
) -> CostMap:
    """Single-map version of asw_aggregate_separable_stack"""
    _check_asw_inputs(costs, guide)
    guide = np.asarray(guide, dtype=np.float64)
    out, valid = asw_aggregate_separable_stack(
        costs.cost[None], costs.valid[None], guide, k, sigma_w, intensity_scale
    )
    return CostMap(out[0], valid[0])
