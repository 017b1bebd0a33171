from typing import Union

import numpy as np
from pydantic import BaseModel, Field

from app.core.errors import InvalidDisparityError, InvalidParameterError

Scalar = Union[float, np.ndarray]


class CameraRig(BaseModel):
    """Rectified stereo pair: shared focal length, horizontal baseline

    The left camera is the reference. A point at column j in the left image
    appears at column j - d in the right image, d = b*f/Z.
    """

    focal_px: float = Field(gt=0)
    baseline_m: float = Field(gt=0)

    @property
    def bf(self) -> float:
        return self.baseline_m * self.focal_px


def _positive(value: Scalar, what: str, error=InvalidParameterError) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise error(f"{what} must be finite and > 0")
    return arr


def _unwrap(arr: np.ndarray, like: Scalar) -> Scalar:
    return float(arr) if np.ndim(like) == 0 else arr


def disparity_to_depth(d: Scalar, rig: CameraRig) -> Scalar:
    """Z = b*f/d"""
    arr = _positive(d, "disparity", InvalidDisparityError)
    return _unwrap(rig.bf / arr, d)


def depth_to_disparity(z: Scalar, rig: CameraRig) -> Scalar:
    """d = b*f/Z"""
    arr = _positive(z, "depth")
    return _unwrap(rig.bf / arr, z)


def expected_depth_error(z: Scalar, delta: Scalar, rig: CameraRig) -> Scalar:
    """Depth error for a subpixel precision delta: eps = delta*Z^2/(b*f)"""
    z_arr = _positive(z, "depth")
    delta_arr = np.asarray(delta, dtype=np.float64)
    if np.any(delta_arr < 0) or not np.all(np.isfinite(delta_arr)):
        raise InvalidParameterError("delta must be finite and >= 0")
    eps = delta_arr * z_arr * z_arr / rig.bf
    return _unwrap(eps, z if np.ndim(z) else delta)
