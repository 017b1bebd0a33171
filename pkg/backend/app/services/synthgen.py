"""Deterministic synthetic active-stereo renderer.

Scenes are analytic planes and axis-aligned boxes seen by a rectified pair
(left camera at the origin, right camera at (b, 0, 0), y pointing down) and lit
by a dot projector at the rig midpoint. Noiseless intensity:

    I* = albedo * (ambient(X) + gain * P(projector(X)) * k / Z^2)

and the observed image is clamp(I* + (sigma1 * I* + sigma2) * N(0, 1)).

All randomness comes from a counter-based hash of (seed, stream, index), so
output does not depend on evaluation order or thread count.
"""

from dataclasses import dataclass
from typing import Annotated, List, Literal, Optional, Tuple, Union
import logging
import math

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import ndimage

from app.core.config import STANDARD_SCENE_INFO, settings
from app.core.errors import InvalidParameterError, RenderError, check_same_shape
from app.core.parallel import map_ordered, split_range
from app.services.geometry import CameraRig
from app.services.warp import DisparityMap

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

# Hash stream ids
_STREAM_DOTS = 1
_STREAM_AMBIENT = 2
_STREAM_NOISE = 3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


# Scene models
class PlaneSpec(BaseModel):
    """Infinite plane n . X = distance"""

    kind: Literal["plane"] = "plane"
    normal: Vec3 = (0.0, 0.0, 1.0)
    distance: float = Field(gt=0)
    albedo: float = Field(default=0.9, gt=0, le=1)

    @field_validator("normal")
    @classmethod
    def unit_normal(cls, v):
        norm = math.sqrt(sum(c * c for c in v))
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        return tuple(c / norm for c in v)


class BoxSpec(BaseModel):
    kind: Literal["box"] = "box"
    center: Vec3
    extents: Vec3  # full side lengths
    albedo: float = Field(default=0.9, gt=0, le=1)

    @field_validator("extents")
    @classmethod
    def positive_extents(cls, v):
        if any(e <= 0 for e in v):
            raise ValueError("box extents must be > 0")
        return v


Primitive = Annotated[Union[PlaneSpec, BoxSpec], Field(discriminator="kind")]


class DotPatternSpec(BaseModel):
    density: float = Field(default=0.1, gt=0, lt=1)
    sigma_px: float = Field(default=1.0, gt=0)
    gain: float = Field(default=1.0, ge=0)


class AmbientSpec(BaseModel):
    level: float = Field(default=0.2, ge=0)
    amplitude: float = Field(default=0.3, ge=0, lt=1)
    frequency: float = Field(default=6.0, gt=0)  # lattice cells per metre


class NoiseSpec(BaseModel):
    sigma1: float = Field(default=settings.NOISE_SIGMA1, ge=0)
    sigma2: float = Field(default=settings.NOISE_SIGMA2, ge=0)


class SceneSpec(BaseModel):
    name: str = "scene"
    rig: CameraRig = CameraRig(
        focal_px=STANDARD_SCENE_INFO["focal_px"], baseline_m=STANDARD_SCENE_INFO["baseline_m"]
    )
    width: int = Field(default=STANDARD_SCENE_INFO["width"], ge=2)
    height: int = Field(default=STANDARD_SCENE_INFO["height"], ge=1)
    primitives: List[Primitive] = Field(min_length=1)
    dot_pattern: DotPatternSpec = DotPatternSpec()
    ambient: AmbientSpec = AmbientSpec()
    noise: NoiseSpec = NoiseSpec()
    falloff_k: float = Field(default=1.5, gt=0)
    seed: int = Field(default=settings.RENDER_SEED, ge=0, lt=2**64)
    d_max: float = Field(default=settings.DISPARITY_MAX, gt=0)

    @model_validator(mode="after")
    def enough_dots(self):
        if self.dot_pattern.density * self.width * self.height < 1:
            raise ValueError("dot density x image size must be >= 1")
        return self


@dataclass
class RenderedPair:
    left: np.ndarray
    right: np.ndarray
    gt_disp_left: DisparityMap
    gt_disp_right: DisparityMap
    occlusion_left: np.ndarray
    noiseless_left: np.ndarray
    noiseless_right: np.ndarray
    spec: Optional[SceneSpec] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.left.shape


# Counter-based hashing
def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def hash_uniform(seed: int, *keys) -> np.ndarray:
    """Uniform [0, 1) values keyed by (seed, *keys); keys broadcast as arrays"""
    arrays = [np.asarray(k).astype(np.int64).astype(np.uint64) for k in keys]
    shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else ()
    h = _splitmix64(np.full(shape, seed, dtype=np.uint64))
    for a in arrays:
        h = _splitmix64(h ^ a)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)


def gaussian_field(shape: Tuple[int, int], seed: int, view: int) -> np.ndarray:
    """Standard normal draw per pixel (Box-Muller on two hashed uniforms)"""
    h, w = shape
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    u1 = 1.0 - hash_uniform(seed, _STREAM_NOISE, view, idx, 0)
    u2 = hash_uniform(seed, _STREAM_NOISE, view, idx, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sensor_noise(noiseless: np.ndarray, noise: NoiseSpec, seed: int, view: int) -> np.ndarray:
    """Observed image clamp(I* + (sigma1 I* + sigma2) n), n ~ N(0, 1)"""
    if noise.sigma1 == 0 and noise.sigma2 == 0:
        return noiseless.copy()
    std = noise.sigma1 * noiseless + noise.sigma2
    return np.clip(noiseless + std * gaussian_field(noiseless.shape, seed, view), 0.0, 1.0)


# Ray casting
def _intersect_plane(prim: PlaneSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    n = prim.normal
    # Elementwise dot products keep every pixel independent of the batch size
    denom = dirs[:, 0] * n[0] + dirs[:, 1] * n[1] + dirs[:, 2] * n[2]
    offset = prim.distance - (origin[0] * n[0] + origin[1] * n[1] + origin[2] * n[2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = offset / denom
    return np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)


def _intersect_box(prim: BoxSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    center = np.asarray(prim.center)
    half = np.asarray(prim.extents) / 2.0
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def _intersect(prim, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    if prim.kind == "plane":
        return _intersect_plane(prim, origin, dirs)
    return _intersect_box(prim, origin, dirs)


def _nearest_hit(primitives, origin: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    best_t = np.full(dirs.shape[0], np.inf)
    best_idx = np.full(dirs.shape[0], -1, dtype=np.intp)
    for idx, prim in enumerate(primitives):
        t = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, idx, best_idx)
    return best_t, best_idx


def _camera_rays(spec: SceneSpec, rows: range) -> np.ndarray:
    """Rays with unit z component through pixel centres of the given rows"""
    f = spec.rig.focal_px
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(rows.start, rows.stop), np.arange(spec.width), indexing="ij")
    dirs = np.stack([(jj - cx) / f, (ii - cy) / f, np.ones(ii.shape)], axis=-1)
    return dirs.reshape(-1, 3)


# Projected pattern
class DotPattern:
    """Projector-plane dot raster, oversampled and blurred once per scene"""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        dots = spec.dot_pattern
        self.os = settings.PATTERN_OVERSAMPLING
        self.focal = spec.rig.focal_px
        self.cx, self.cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
        reach = int(math.ceil(4.0 * dots.sigma_px)) + 1
        self.margin_u = int(math.ceil(spec.d_max / 2.0)) + reach
        self.margin_v = reach
        self.width = spec.width + 2 * self.margin_u
        self.height = spec.height + 2 * self.margin_v
        self.raster = self._build_raster()

    def _build_raster(self) -> np.ndarray:
        dots = self.spec.dot_pattern
        n_dots = int(round(dots.density * self.width * self.height))
        idx = np.arange(n_dots, dtype=np.int64)
        u = hash_uniform(self.spec.seed, _STREAM_DOTS, idx, 0) * self.width
        v = hash_uniform(self.spec.seed, _STREAM_DOTS, idx, 1) * self.height

        raster = np.zeros((self.height * self.os, self.width * self.os))
        np.add.at(
            raster,
            (np.floor(v * self.os).astype(np.intp), np.floor(u * self.os).astype(np.intp)),
            1.0,
        )
        sigma = dots.sigma_px * self.os
        raster = ndimage.gaussian_filter(raster, sigma, mode="constant")

        # Scale so an isolated dot peaks at 1
        size = 2 * int(math.ceil(4.0 * sigma)) + 1
        delta = np.zeros((size, size))
        delta[size // 2, size // 2] = 1.0
        peak = ndimage.gaussian_filter(delta, sigma, mode="constant")[size // 2, size // 2]
        logger.debug(f"Dot raster {raster.shape} with {n_dots} dots")
        return np.clip(raster / peak, 0.0, 1.0)

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.spec.rig.baseline_m / 2.0, 0.0, 0.0])

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Pattern value P at the projector image of 3D points"""
        rel = points - self.origin
        u = self.focal * rel[:, 0] / rel[:, 2] + self.cx
        v = self.focal * rel[:, 1] / rel[:, 2] + self.cy
        coords = np.stack([(v + self.margin_v) * self.os, (u + self.margin_u) * self.os])
        return ndimage.map_coordinates(self.raster, coords, order=1, mode="constant", cval=0.0)

    def lit(self, points: np.ndarray) -> np.ndarray:
        """False where another surface shadows the point from the projector"""
        rel = points - self.origin
        dirs = rel / rel[:, 2:3]
        t, _ = _nearest_hit(self.spec.primitives, self.origin, dirs)
        return t >= rel[:, 2] * (1.0 - 1e-6)


def _value_noise(points: np.ndarray, ambient: AmbientSpec, seed: int) -> np.ndarray:
    """Trilinear value noise on a world-space lattice, values in [0, 1)"""
    p = points * ambient.frequency
    base = np.floor(p).astype(np.int64)
    frac = p - base
    fade = frac * frac * (3.0 - 2.0 * frac)

    out = np.zeros(points.shape[0])
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                value = hash_uniform(
                    seed, _STREAM_AMBIENT, base[:, 0] + cx, base[:, 1] + cy, base[:, 2] + cz
                )
                wx = fade[:, 0] if cx else 1.0 - fade[:, 0]
                wy = fade[:, 1] if cy else 1.0 - fade[:, 1]
                wz = fade[:, 2] if cz else 1.0 - fade[:, 2]
                out += wx * wy * wz * value
    return out


def _render_rows(
    spec: SceneSpec, pattern: DotPattern, origin: np.ndarray, rows: range
) -> Tuple[np.ndarray, np.ndarray]:
    dirs = _camera_rays(spec, rows)
    t, idx = _nearest_hit(spec.primitives, origin, dirs)
    if np.any(~np.isfinite(t)):
        raise RenderError(
            f"Scene '{spec.name}': {int(np.sum(~np.isfinite(t)))} rays miss all geometry"
        )

    points = origin + dirs * t[:, None]
    z = points[:, 2]
    albedo = np.array([p.albedo for p in spec.primitives])[idx]

    amb = spec.ambient
    ambient = amb.level * (1.0 + amb.amplitude * (2.0 * _value_noise(points, amb, spec.seed) - 1.0))
    dots = pattern.sample(points) * pattern.lit(points)
    intensity = albedo * (ambient + spec.dot_pattern.gain * dots * spec.falloff_k / (z * z))

    shape = (len(rows), spec.width)
    return np.clip(intensity, 0.0, 1.0).reshape(shape), z.reshape(shape)


def _render_view(
    spec: SceneSpec, pattern: DotPattern, origin: np.ndarray, threads: int
) -> Tuple[np.ndarray, np.ndarray]:
    bands = [range(lo, hi) for lo, hi in split_range(spec.height, max(threads, 1))]
    parts = map_ordered(lambda rows: _render_rows(spec, pattern, origin, rows), bands, threads)
    return np.vstack([p[0] for p in parts]), np.vstack([p[1] for p in parts])


# Operations
def gt_occlusion(
    gt_disp_left: DisparityMap, gt_disp_right: DisparityMap, theta: float = 0.5
) -> np.ndarray:
    """Occluded iff j - round(d_l) leaves the image or |d_l - d_r(i, j - round(d_l))| >= theta"""
    check_same_shape(gt_disp_left.values, gt_disp_right.values, names=("gt_left", "gt_right"))
    h, w = gt_disp_left.shape
    target = np.arange(w)[None, :] - np.round(gt_disp_left.values).astype(np.intp)
    inside = (target >= 0) & (target < w) & gt_disp_left.valid
    safe = np.clip(target, 0, w - 1)
    rows = np.arange(h)[:, None]
    other = gt_disp_right.values[rows, safe]
    agree = gt_disp_right.valid[rows, safe] & (np.abs(gt_disp_left.values - other) < theta)
    return ~(inside & agree)


def render_pair(spec: SceneSpec, threads: int = 1) -> RenderedPair:
    """Render the noiseless and noisy pair with ground-truth disparity and occlusion"""
    pattern = DotPattern(spec)
    bf = spec.rig.bf

    noiseless_left, z_left = _render_view(spec, pattern, np.zeros(3), threads)
    noiseless_right, z_right = _render_view(
        spec, pattern, np.array([spec.rig.baseline_m, 0.0, 0.0]), threads
    )

    disp_left, disp_right = bf / z_left, bf / z_right
    too_close = max(disp_left.max(), disp_right.max())
    if too_close > spec.d_max:
        raise RenderError(
            f"Scene '{spec.name}' reaches disparity {too_close:.2f} > d_max {spec.d_max}"
        )
    gt_left = DisparityMap(disp_left)
    gt_right = DisparityMap(disp_right)

    pair = RenderedPair(
        left=sensor_noise(noiseless_left, spec.noise, spec.seed, 0),
        right=sensor_noise(noiseless_right, spec.noise, spec.seed, 1),
        gt_disp_left=gt_left,
        gt_disp_right=gt_right,
        occlusion_left=gt_occlusion(gt_left, gt_right, 0.5),
        noiseless_left=noiseless_left,
        noiseless_right=noiseless_right,
        spec=spec,
    )
    saturated = float(np.mean(noiseless_left >= 1.0))
    if saturated > 0.05:
        logger.warning(f"Scene '{spec.name}': {saturated:.1%} of left pixels saturate")
    logger.info(
        f"Rendered '{spec.name}' {spec.width}x{spec.height}, "
        f"disparity {disp_left.min():.2f}..{disp_left.max():.2f}, "
        f"{int(pair.occlusion_left.sum())} occluded px"
    )
    return pair


# Standard battery
def _background() -> PlaneSpec:
    return PlaneSpec(distance=STANDARD_SCENE_INFO["background_m"])


def wall_scene(distance: float, **overrides) -> SceneSpec:
    """Fronto-parallel wall closed by the far background plane"""
    if not distance > 0:
        raise InvalidParameterError(f"wall distance must be > 0, got {distance}")
    return SceneSpec(
        name=f"wall:{distance:g}",
        primitives=[PlaneSpec(distance=distance), _background()],
        **overrides,
    )


def slant_scene(**overrides) -> SceneSpec:
    angle = math.radians(STANDARD_SCENE_INFO["slant_deg"])
    z0 = STANDARD_SCENE_INFO["slant_distance_m"]
    normal = (math.sin(angle), 0.0, math.cos(angle))
    return SceneSpec(
        name=f"slant:{STANDARD_SCENE_INFO['slant_deg']:g}",
        primitives=[PlaneSpec(normal=normal, distance=z0 * normal[2]), _background()],
        **overrides,
    )


def box_scene(**overrides) -> SceneSpec:
    box = STANDARD_SCENE_INFO["box"]
    return SceneSpec(
        name="box",
        primitives=[
            BoxSpec(center=tuple(box["center_m"]), extents=tuple(box["extents_m"])),
            PlaneSpec(distance=box["wall_m"]),
            _background(),
        ],
        **overrides,
    )


def textureless_scene(**overrides) -> SceneSpec:
    info = STANDARD_SCENE_INFO["textureless"]
    overrides.setdefault("dot_pattern", DotPatternSpec(gain=0.0))
    overrides.setdefault("ambient", AmbientSpec(amplitude=0.0))
    return SceneSpec(
        name="textureless",
        primitives=[PlaneSpec(distance=info["wall_m"]), _background()],
        **overrides,
    )


def standard_scenes(**overrides) -> List[SceneSpec]:
    """Fronto wall battery, slanted wall, box occlusion and textureless scenes"""
    scenes = [wall_scene(z, **overrides) for z in STANDARD_SCENE_INFO["wall_distances_m"]]
    scenes += [slant_scene(**overrides), box_scene(**overrides), textureless_scene(**overrides)]
    return scenes


def builtin_scene(name: str, **overrides) -> SceneSpec:
    """Look up a built-in scene: wall:<Z>, slant, box or textureless"""
    kind, _, arg = name.partition(":")
    if kind == "wall" and arg:
        try:
            distance = float(arg)
        except ValueError:
            raise InvalidParameterError(f"Invalid wall distance in builtin '{name}'")
        return wall_scene(distance, **overrides)
    if kind == "slant" and not arg:
        return slant_scene(**overrides)
    if kind == "box" and not arg:
        return box_scene(**overrides)
    if kind == "textureless" and not arg:
        return textureless_scene(**overrides)
    raise InvalidParameterError(
        f"Unknown builtin scene '{name}', expected wall:<Z>, slant, box, textureless or battery"
    )
