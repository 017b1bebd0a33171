"""gen: render a scene (file or builtin) into a pair directory."""

from pathlib import Path
from typing import List, Optional
import argparse
import logging
import time

from pydantic import BaseModel, ValidationError, model_validator

from app.cli.options import add_threads
from app.core.errors import InvalidParameterError
from app.core.storage import PairStore, RunStore, read_model
from app.services.synthgen import RenderedPair, SceneSpec, builtin_scene, render_pair, standard_scenes

logger = logging.getLogger(__name__)


# Pydantic models
class GenRequest(BaseModel):
    out: Path
    scene: Optional[Path] = None
    builtin: Optional[str] = None
    seed: Optional[int] = None
    threads: int = 1

    @model_validator(mode="after")
    def one_source(self):
        if (self.scene is None) == (self.builtin is None):
            raise ValueError("exactly one of --scene or --builtin is required")
        return self


# Helper functions
def scene_directory_name(name: str) -> str:
    return name.replace(":", "_")


def pair_arrays(pair: RenderedPair) -> dict:
    return {
        "left": pair.left,
        "right": pair.right,
        "noiseless_left": pair.noiseless_left,
        "noiseless_right": pair.noiseless_right,
        "gt_disp_left": (pair.gt_disp_left.values, pair.gt_disp_left.valid),
        "gt_disp_right": (pair.gt_disp_right.values, pair.gt_disp_right.valid),
        "occlusion_left": pair.occlusion_left,
    }


def resolve_scenes(request: GenRequest) -> List[SceneSpec]:
    overrides = {} if request.seed is None else {"seed": request.seed}
    if request.scene is not None:
        spec = read_model(request.scene, SceneSpec)
        return [spec.model_copy(update=overrides)]
    if request.builtin == "battery":
        return standard_scenes(**overrides)
    return [builtin_scene(request.builtin, **overrides)]


def write_pair(spec: SceneSpec, out_dir: Path, threads: int) -> Path:
    """Render one scene and write it with its manifest"""
    run = RunStore(out_dir, "gen")
    start = time.perf_counter()
    pair = render_pair(spec, threads=threads)
    run.manifest.timings["render"] = time.perf_counter() - start

    start = time.perf_counter()
    PairStore(out_dir).save(run, pair_arrays(pair), spec.model_dump_json(indent=2))
    run.manifest.timings["write"] = time.perf_counter() - start

    run.manifest.config = spec.model_dump(mode="json")
    run.manifest.seeds = {"render": spec.seed}
    return run.finish()


def run(args: argparse.Namespace) -> int:
    try:
        request = GenRequest(
            out=args.out, scene=args.scene, builtin=args.builtin, seed=args.seed, threads=args.threads
        )
    except ValidationError as e:
        raise InvalidParameterError(e.errors()[0]["msg"])

    scenes = resolve_scenes(request)
    if request.builtin == "battery":
        for spec in scenes:
            write_pair(spec, request.out / scene_directory_name(spec.name), request.threads)
    else:
        write_pair(scenes[0], request.out, request.threads)
    logger.info(f"Generated {len(scenes)} pair(s) under {request.out}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen", help="render a synthetic active-stereo pair")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--scene", type=Path, help="SceneSpec JSON file")
    source.add_argument(
        "--builtin", help="wall:<Z>, slant, box, textureless or battery (all standard scenes)"
    )
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override the scene seed")
    add_threads(parser)
    parser.set_defaults(handler=run)
