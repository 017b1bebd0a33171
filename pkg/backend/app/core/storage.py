"""File formats and run directories.

PFM  grayscale 'Pf', little-endian (negative scale), rows bottom-to-top.
     Disparity maps store invalid pixels as +inf.
PGM  binary 'P5', 8-bit, masks as 0 / 255, through Pillow.
PNG  8-bit previews through Pillow.
"""

from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import io
import json
import logging

import numpy as np
import pandas as pd
from PIL import Image as PILImage
from pydantic import BaseModel, Field

from app.core.config import settings
from app.core.errors import MalformedFileError, StorageError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@contextmanager
def io_errors(path: PathLike, action: str):
    """Turn OS-level failures into StorageError"""
    try:
        yield
    except OSError as e:
        logger.error(f"Cannot {action} {path}: {str(e)}")
        raise StorageError(f"Cannot {action} {path}: {e.strerror or str(e)}")


def ensure_directory(path: PathLike) -> Path:
    path = Path(path)
    with io_errors(path, "create directory"):
        path.mkdir(parents=True, exist_ok=True)
    return path


# PFM
def write_pfm(path: PathLike, data: np.ndarray) -> Path:
    path = Path(path)
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise MalformedFileError(f"PFM writer expects a 2D array, got {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.flipud(arr).astype("<f4").tobytes()
    with io_errors(path, "write"):
        path.write_bytes(header + body)
    return path


def _header_tokens(raw: bytes, count: int, path: Path):
    """First `count` whitespace-separated header tokens and the data offset"""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.find(b"\n", pos)
            if pos < 0:
                break
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            break
        tokens.append(raw[start:pos].decode("ascii", errors="replace"))
    if len(tokens) < count:
        raise MalformedFileError(f"Truncated header in {path}")
    # Exactly one whitespace byte separates the header from the data
    return tokens, pos + 1


def read_pfm(path: PathLike) -> np.ndarray:
    path = Path(path)
    with io_errors(path, "read"):
        raw = path.read_bytes()
    tokens, offset = _header_tokens(raw, 4, path)
    magic, w, h, scale = tokens
    if magic != "Pf":
        raise MalformedFileError(f"{path}: unsupported PFM type '{magic}' (expected 'Pf')")
    try:
        w, h, scale = int(w), int(h), float(scale)
    except ValueError:
        raise MalformedFileError(f"{path}: invalid PFM header {tokens}")
    if w <= 0 or h <= 0 or scale == 0:
        raise MalformedFileError(f"{path}: invalid PFM dimensions or scale {tokens}")

    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * 4
    body = raw[offset : offset + expected]
    if len(body) != expected:
        raise MalformedFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float64)


def write_disparity(path: PathLike, values: np.ndarray, valid: np.ndarray) -> Path:
    return write_pfm(path, np.where(valid, values, np.inf))


def read_disparity(path: PathLike):
    """(values, valid) with non-finite entries invalid"""
    arr = read_pfm(path)
    valid = np.isfinite(arr)
    return np.where(valid, arr, 0.0), valid


# PGM / PNG
def write_mask(path: PathLike, mask: np.ndarray) -> Path:
    path = Path(path)
    data = np.asarray(mask, dtype=bool).astype(np.uint8) * 255
    with io_errors(path, "write"):
        PILImage.fromarray(data).save(path, format="PPM")
    return path


def read_mask(path: PathLike) -> np.ndarray:
    path = Path(path)
    with io_errors(path, "read"):
        raw = path.read_bytes()
    try:
        with PILImage.open(io.BytesIO(raw), formats=["PPM"]) as img:
            img.load()
            if img.mode != "L":
                raise MalformedFileError(f"{path}: expected an 8-bit grayscale PGM, got {img.mode}")
            data = np.asarray(img)
    except (OSError, SyntaxError, ValueError) as e:
        raise MalformedFileError(f"{path}: unreadable PGM ({e})")
    return data > 127


def write_png(path: PathLike, img: np.ndarray) -> Path:
    path = Path(path)
    clipped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(clipped * 255.0).astype(np.uint8)
    with io_errors(path, "write"):
        PILImage.fromarray(data).save(path)
    return path


# JSON models
def read_model(path: PathLike, model: type):
    path = Path(path)
    with io_errors(path, "read"):
        text = path.read_text()
    try:
        return model.model_validate_json(text)
    except ValueError as e:
        raise MalformedFileError(f"{path}: {str(e).splitlines()[0]}")


def write_model(path: PathLike, obj: BaseModel) -> Path:
    path = Path(path)
    with io_errors(path, "write"):
        path.write_text(obj.model_dump_json(indent=2))
    return path


class RunManifest(BaseModel):
    tool_version: str = settings.TOOL_VERSION
    command: str
    created_at: datetime = Field(default_factory=datetime.now)
    config: Dict[str, Any] = {}
    inputs: Dict[str, str] = {}
    outputs: List[str] = []
    seeds: Dict[str, int] = {}
    timings: Dict[str, float] = {}


class RunStore:
    """Output directory of one command; every written file is recorded"""

    def __init__(self, directory: PathLike, command: str):
        self.directory = ensure_directory(directory)
        self.manifest = RunManifest(command=command)

    def path(self, name: str) -> Path:
        if name not in self.manifest.outputs:
            self.manifest.outputs.append(name)
        return self.directory / name

    def write_disparity(self, name: str, values: np.ndarray, valid: np.ndarray) -> Path:
        return write_disparity(self.path(name), values, valid)

    def write_pfm(self, name: str, data: np.ndarray) -> Path:
        return write_pfm(self.path(name), data)

    def write_mask(self, name: str, mask: np.ndarray) -> Path:
        return write_mask(self.path(name), mask)

    def write_png(self, name: str, img: np.ndarray) -> Path:
        return write_png(self.path(name), img)

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(name)
        with io_errors(path, "write"):
            frame.to_csv(path, index=False)
        return path

    def write_model(self, name: str, obj: BaseModel) -> Path:
        return write_model(self.path(name), obj)

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        with io_errors(path, "write"):
            path.write_text(text)
        return path

    def finish(self) -> Path:
        path = self.directory / "manifest.json"
        write_model(path, self.manifest)
        logger.info(f"Wrote {len(self.manifest.outputs)} outputs to {self.directory}")
        return path


# Rendered pairs
PAIR_IMAGES = ("left", "right", "noiseless_left", "noiseless_right")
PAIR_DISPARITIES = ("gt_disp_left", "gt_disp_right")
PAIR_MASK = "occlusion_left"


class PairStore:
    """Directory holding one rendered pair"""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def file(self, name: str) -> Path:
        return self.directory / name

    def exists(self) -> bool:
        return self.file("left.pfm").exists() and self.file("right.pfm").exists()

    @classmethod
    def discover(cls, root: PathLike) -> List[Path]:
        """root itself when it holds a pair, otherwise its pair sub-directories"""
        root = Path(root)
        if not root.is_dir():
            raise StorageError(f"Pair directory {root} does not exist")
        if cls(root).exists():
            return [root]
        found = sorted(p for p in root.iterdir() if p.is_dir() and cls(p).exists())
        if not found:
            raise StorageError(f"No left.pfm / right.pfm found in {root}")
        return found

    def save(self, run: RunStore, arrays: Dict[str, np.ndarray], scene_json: Optional[str]) -> None:
        for name in PAIR_IMAGES:
            run.write_pfm(f"{name}.pfm", arrays[name])
        for name in PAIR_DISPARITIES:
            values, valid = arrays[name]
            run.write_disparity(f"{name}.pfm", values, valid)
        run.write_mask(f"{PAIR_MASK}.pgm", arrays[PAIR_MASK])
        run.write_png("left.png", arrays["left"])
        run.write_png("right.png", arrays["right"])
        if scene_json is not None:
            run.write_text("scene.json", scene_json)

    def load_images(self):
        """(left, right) intensities"""
        if not self.directory.is_dir():
            raise StorageError(f"Pair directory {self.directory} does not exist")
        return read_pfm(self.file("left.pfm")), read_pfm(self.file("right.pfm"))

    def load_ground_truth(self):
        """(gt_left, gt_right, occlusion) as (values, valid) pairs and a mask"""
        gt_left = read_disparity(self.file("gt_disp_left.pfm"))
        gt_right = read_disparity(self.file("gt_disp_right.pfm"))
        occlusion = read_mask(self.file(f"{PAIR_MASK}.pgm"))
        return gt_left, gt_right, occlusion

    def load_scene_json(self) -> Optional[Dict[str, Any]]:
        path = self.file("scene.json")
        if not path.exists():
            return None
        with io_errors(path, "read"):
            try:
                return json.loads(path.read_text())
            except json.JSONDecodeError as e:
                raise MalformedFileError(f"{path}: {str(e)}")


__all__ = [
    "RunManifest",
    "RunStore",
    "PairStore",
    "read_pfm",
    "write_pfm",
    "read_disparity",
    "write_disparity",
    "read_mask",
    "write_mask",
    "write_png",
    "read_model",
    "write_model",
    "ensure_directory",
    "io_errors",
]
