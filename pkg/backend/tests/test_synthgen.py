import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import InvalidParameterError, RenderError
from app.services.synthgen import (
    AmbientSpec,
    DotPatternSpec,
    NoiseSpec,
    SceneSpec,
    builtin_scene,
    gaussian_field,
    gt_occlusion,
    hash_uniform,
    render_pair,
    sensor_noise,
    standard_scenes,
    textureless_scene,
)
from app.services.warp import DisparityMap, warp_scanline

from conftest import small_box, small_wall

NO_NOISE = NoiseSpec(sigma1=0.0, sigma2=0.0)


def test_fronto_wall_has_constant_disparity(noiseless_wall_pair):
    pair = noiseless_wall_pair
    np.testing.assert_allclose(pair.gt_disp_left.values, 25.2, atol=1e-9)
    np.testing.assert_allclose(pair.gt_disp_right.values, 25.2, atol=1e-9)
    # Only the columns whose match leaves the right image are occluded
    assert pair.occlusion_left[:, :25].all()
    assert not pair.occlusion_left[:, 25:].any()


def test_zero_noise_leaves_the_noiseless_image(noiseless_wall_pair):
    np.testing.assert_array_equal(noiseless_wall_pair.left, noiseless_wall_pair.noiseless_left)
    np.testing.assert_array_equal(noiseless_wall_pair.right, noiseless_wall_pair.noiseless_right)


def test_rendering_is_deterministic_across_runs_and_threads():
    spec = small_wall(width=64, height=40)
    first = render_pair(spec, threads=1)
    again = render_pair(spec, threads=1)
    threaded = render_pair(spec, threads=3)
    for other in (again, threaded):
        np.testing.assert_array_equal(first.left, other.left)
        np.testing.assert_array_equal(first.right, other.right)
        np.testing.assert_array_equal(first.gt_disp_left.values, other.gt_disp_left.values)


def test_seed_changes_the_pattern():
    a = render_pair(small_wall(width=64, height=40, seed=1))
    b = render_pair(small_wall(width=64, height=40, seed=2))
    assert not np.array_equal(a.noiseless_left, b.noiseless_left)


def test_views_agree_along_epipolar_lines(noiseless_wall_pair):
    pair = noiseless_wall_pair
    recon, in_frame = warp_scanline(pair.noiseless_right, pair.gt_disp_left)
    keep = in_frame & ~pair.occlusion_left
    assert np.mean(np.abs(pair.noiseless_left - recon)[keep]) < 2e-2


def test_box_occludes_a_band_of_the_wall(box_pair):
    row = box_pair.shape[0] // 2
    band = box_pair.occlusion_left[row, 26:]
    # Box front at 1.1 m (d = 45.8) against the wall at 2 m (d = 25.2)
    assert 17 <= int(band.sum()) <= 23
    d = box_pair.gt_disp_left.values[row]
    assert d.max() == pytest.approx(50.4 / 1.1, abs=1e-6)


def test_projector_falloff_is_inverse_square():
    overrides = {
        "width": 160,
        "height": 96,
        "noise": NO_NOISE,
        "ambient": AmbientSpec(level=0.0),
        "dot_pattern": DotPatternSpec(gain=0.2),
    }
    near = render_pair(small_wall(1.0, **overrides))
    far = render_pair(small_wall(2.0, **overrides))
    ratio = near.noiseless_left.max() / far.noiseless_left.max()
    assert ratio == pytest.approx(4.0, rel=0.02)


def test_gaussian_field_is_standard_normal():
    field = gaussian_field((1000, 1000), seed=3, view=0)
    assert abs(field.mean()) < 0.01
    assert field.std() == pytest.approx(1.0, rel=0.02)


def test_sensor_noise_std_follows_intensity():
    flat = np.full((1000, 1000), 0.5)
    noise = NoiseSpec(sigma1=0.05, sigma2=0.002)
    observed = sensor_noise(flat, noise, seed=11, view=1)
    assert np.std(observed - flat) == pytest.approx(0.05 * 0.5 + 0.002, rel=0.02)
    assert np.array_equal(sensor_noise(flat, NO_NOISE, 11, 1), flat)


def test_hash_uniform_is_keyed():
    a = hash_uniform(5, 1, np.arange(1000))
    assert np.array_equal(a, hash_uniform(5, 1, np.arange(1000)))
    assert not np.array_equal(a, hash_uniform(6, 1, np.arange(1000)))
    assert a.min() >= 0.0 and a.max() < 1.0


def test_gt_occlusion_marks_disagreeing_pixels():
    left = DisparityMap(np.array([[1.0, 1.0, 1.0, 3.0, 3.0]]))
    right = DisparityMap(np.array([[1.0, 1.0, 1.0, 1.0, 1.0]]))
    occluded = gt_occlusion(left, right)
    assert occluded.tolist() == [[True, False, False, True, True]]


def test_textureless_scene_is_flat_without_noise():
    pair = render_pair(textureless_scene(width=64, height=40, noise=NO_NOISE))
    np.testing.assert_allclose(pair.left, 0.9 * 0.2)


def test_standard_battery():
    scenes = standard_scenes()
    walls = [s for s in scenes if s.name.startswith("wall:")]
    assert [s.name for s in walls] == [
        "wall:0.5", "wall:1", "wall:1.5", "wall:2", "wall:2.5", "wall:3", "wall:3.5"
    ]
    assert {s.name for s in scenes} >= {"slant:50", "box", "textureless"}
    assert all(s.rig.baseline_m == 0.09 for s in scenes)


def test_builtin_lookup():
    assert builtin_scene("wall:2.0").name == "wall:2"
    assert builtin_scene("box", seed=3).seed == 3
    with pytest.raises(InvalidParameterError):
        builtin_scene("castle")
    with pytest.raises(InvalidParameterError):
        builtin_scene("wall:far")


def test_disparity_beyond_range_is_a_render_error():
    with pytest.raises(RenderError):
        render_pair(small_wall(0.5, d_max=64.0))


def test_scene_validation():
    with pytest.raises(ValidationError):
        SceneSpec(primitives=[])
    with pytest.raises(ValidationError):
        small_wall(width=4, height=2, dot_pattern=DotPatternSpec(density=0.01))
    with pytest.raises(ValidationError):
        small_wall(seed=-1)


def test_small_box_is_a_valid_scene():
    assert small_box().primitives[0].kind == "box"
