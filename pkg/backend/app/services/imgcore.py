"""Image container helpers, windowed statistics and local contrast normalization.

Images are plain 2D float64 numpy arrays (row-major, height x width) with a
nominal [0, 1] range. Window statistics shrink to the in-bounds part of the
(2r+1)^2 window instead of padding.
"""

from dataclasses import dataclass
from typing import Tuple
import logging

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidParameterError, ShapeMismatchError

logger = logging.getLogger(__name__)

Image = np.ndarray


@dataclass(frozen=True)
class LocalStats:
    mu: np.ndarray
    sigma: np.ndarray
    radius: int
    eta: float = settings.LCN_ETA

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mu.shape

    def compatible_with(self, other: "LocalStats") -> bool:
        return self.radius == other.radius and self.eta == other.eta


def as_image(data, name: str = "image") -> Image:
    """Validate and convert to a finite 2D float64 array"""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2D, got shape {img.shape}")
    if img.size == 0:
        raise InvalidParameterError(f"{name} is empty")
    if not np.all(np.isfinite(img)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return img


def to_uint8(img: Image) -> np.ndarray:
    """Linear clamp of [0,1] intensities to 8 bits for visualization"""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _window_bounds(n: int, radius: int) -> Tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n)
    lo = np.maximum(idx - radius, 0)
    hi = np.minimum(idx + radius, n - 1) + 1
    return lo, hi


def box_sum(img: Image, radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sum and pixel count over the in-bounds (2r+1)^2 window of every pixel"""
    h, w = img.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)

    r0, r1 = _window_bounds(h, radius)
    c0, c1 = _window_bounds(w, radius)
    r0, r1 = r0[:, None], r1[:, None]
    c0, c1 = c0[None, :], c1[None, :]

    total = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
    count = (r1 - r0) * (c1 - c0)
    return total, count.astype(np.float64)


def local_stats(img: Image, radius: int = settings.LCN_RADIUS) -> LocalStats:
    """Per-pixel mean and population standard deviation over a shrinking window"""
    img = as_image(img)
    if radius < 1:
        raise InvalidParameterError(f"radius must be >= 1, got {radius}")

    # Centering keeps the integral sums small and makes flat images exact
    offset = float(img.min())
    centered = img - offset

    s1, count = box_sum(centered, radius)
    s2, _ = box_sum(centered * centered, radius)
    mean_c = s1 / count
    var = np.maximum(s2 / count - mean_c * mean_c, 0.0)

    mu = mean_c + offset
    sigma = np.sqrt(var)
    return LocalStats(mu=mu, sigma=sigma, radius=radius)


def lcn_normalize(
    img: Image, eta: float = settings.LCN_ETA, radius: int = settings.LCN_RADIUS
) -> Tuple[Image, LocalStats]:
    """I_LCN = (I - mu) / (sigma + eta), returned with the stats used"""
    if not eta > 0:
        raise InvalidParameterError(f"eta must be > 0, got {eta}")
    img = as_image(img)
    stats = local_stats(img, radius)
    stats = LocalStats(mu=stats.mu, sigma=stats.sigma, radius=radius, eta=eta)
    return (img - stats.mu) / (stats.sigma + eta), stats


def apply_lcn(img: Image, stats: LocalStats) -> Image:
    """Normalize img with precomputed stats"""
    if img.shape != stats.shape:
        raise ShapeMismatchError(
            f"Stats computed for {stats.shape} cannot normalize {img.shape}"
        )
    return (img - stats.mu) / (stats.sigma + stats.eta)
