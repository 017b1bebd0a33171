import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.services.costvolume import AswConfig  # noqa: E402
from app.services.matcher import MatchConfig  # noqa: E402
from app.services.synthgen import (  # noqa: E402
    BoxSpec,
    NoiseSpec,
    PlaneSpec,
    SceneSpec,
    render_pair,
    wall_scene,
)

SMALL_WALL = {"width": 96, "height": 48}


def small_wall(distance: float = 2.0, **overrides) -> SceneSpec:
    """Fronto wall rendered at a test-friendly size"""
    return wall_scene(distance, **{**SMALL_WALL, **overrides})


def small_box(**overrides) -> SceneSpec:
    """A 10 cm box in front of a wall at 2 m, 160x96"""
    fields = {
        "name": "box",
        "width": 160,
        "height": 96,
        "primitives": [
            BoxSpec(center=(0.0, 0.0, 1.2), extents=(0.1, 0.1, 0.2)),
            PlaneSpec(distance=2.0),
            PlaneSpec(distance=20.0),
        ],
    }
    fields.update(overrides)
    return SceneSpec(**fields)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def wall_pair():
    return render_pair(small_wall())


@pytest.fixture(scope="session")
def noiseless_wall_pair():
    return render_pair(small_wall(noise=NoiseSpec(sigma1=0.0, sigma2=0.0)))


@pytest.fixture(scope="session")
def box_pair():
    return render_pair(small_box())


@pytest.fixture
def fast_config():
    """wlcn + exact ASW with a small window over [0, 40]"""
    return MatchConfig(
        cost="wlcn", aggregation="asw", asw=AswConfig(k=4, mode="exact"), d_min=0, d_max=40
    )
