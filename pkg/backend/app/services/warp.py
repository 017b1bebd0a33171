"""Scanline reconstruction sampler: I_hat(i, j) = I(i, j - d) with linear
interpolation between the two nearest pixels of the same row.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple
import logging

import numpy as np

from app.core.errors import InvalidParameterError, ShapeMismatchError, check_same_shape
from app.services.imgcore import Image

logger = logging.getLogger(__name__)


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"disparity must be 2D, got {self.values.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values)
        check_same_shape(self.values, self.valid, names=("values", "valid"))
        if np.any(self.values[self.valid] < 0):
            raise InvalidParameterError("disparity values must be >= 0")
        # Invalid entries carry 0 so downstream arithmetic stays finite
        self.values = np.where(self.valid, self.values, 0.0)

    @classmethod
    def constant(cls, shape: Tuple[int, int], value: float) -> "DisparityMap":
        return cls(np.full(shape, float(value)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def mirrored(self) -> "DisparityMap":
        return DisparityMap(self.values[:, ::-1].copy(), self.valid[:, ::-1].copy())

    def with_mask(self, mask: np.ndarray) -> "DisparityMap":
        return DisparityMap(self.values.copy(), self.valid & mask)


@dataclass(frozen=True)
class SampleCell:
    """Interpolation cell [c, c+1] and weight alpha for every pixel"""

    left: np.ndarray
    right: np.ndarray
    alpha: np.ndarray
    mask: np.ndarray


def sample_cells(width: int, disparity: DisparityMap) -> SampleCell:
    """Locate x = j - d inside the row; out-of-row samples are masked"""
    h = disparity.height
    cols = np.broadcast_to(np.arange(width, dtype=np.float64), (h, width))
    x = cols - disparity.values
    mask = disparity.valid & (x >= 0.0) & (x <= width - 1)

    # At integer x the cell is [x, x+1] with alpha 0; the last column uses
    # [W-2, W-1] with alpha 1 so the value is still exact.
    x_safe = np.where(mask, x, 0.0)
    left = np.floor(x_safe).astype(np.intp)
    if width > 1:
        left = np.minimum(left, width - 2)
        right = left + 1
    else:
        right = left
    alpha = np.where(mask, x_safe - left, 0.0)
    return SampleCell(left=left, right=right, alpha=alpha, mask=mask)


def _rows(h: int) -> np.ndarray:
    return np.arange(h)[:, None]


def warp_scanline(
    source: Image, disparity: DisparityMap, cells: Optional[SampleCell] = None
) -> Tuple[Image, np.ndarray]:
    """Reconstruct the reference view from source shifted by disparity"""
    source = np.asarray(source, dtype=np.float64)
    check_same_shape(source, disparity.values, names=("source", "disparity"))
    if cells is None:
        cells = sample_cells(source.shape[1], disparity)

    rows = _rows(source.shape[0])
    lo = source[rows, cells.left]
    hi = source[rows, cells.right]
    out = (1.0 - cells.alpha) * lo + cells.alpha * hi
    out = np.where(cells.mask, out, 0.0)
    return out, cells.mask


def warp_grad(
    source: Image, disparity: DisparityMap, cells: Optional[SampleCell] = None
) -> Image:
    """d I_hat(i,j) / d d(i,j) = -(src(i, c+1) - src(i, c)) of the active cell"""
    source = np.asarray(source, dtype=np.float64)
    check_same_shape(source, disparity.values, names=("source", "disparity"))
    if cells is None:
        cells = sample_cells(source.shape[1], disparity)

    rows = _rows(source.shape[0])
    slope = source[rows, cells.right] - source[rows, cells.left]
    return np.where(cells.mask, -slope, 0.0)


def shift_constant(source: Image, d: int) -> Tuple[Image, np.ndarray]:
    """Integer warp by a constant disparity (exact pure shift)"""
    h, w = source.shape
    out = np.zeros_like(source, dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    if d < w:
        out[:, d:] = source[:, : w - d]
        mask[:, d:] = True
    return out, mask
