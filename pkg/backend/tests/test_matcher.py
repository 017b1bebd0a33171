import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import InvalidParameterError
from app.services.costvolume import AswConfig
from app.services.lcnloss import prepare_terms
from app.services.matcher import (
    MatchConfig,
    ReadoutConfig,
    ReconstructionObjective,
    RefinementConfig,
    huber,
    huber_grad,
    learning_rate_at,
    match,
    refine_gd,
    window_schedule,
)
from app.services.imgcore import local_stats
from app.services.synthgen import NoiseSpec, render_pair, textureless_scene
from app.services.warp import DisparityMap

from conftest import small_wall


def _within_one_px(result, pair):
    """Fraction of non-occluded pixels with a valid estimate within 1 px"""
    candidates = ~pair.occlusion_left
    err = np.abs(result.disp_left.values - pair.gt_disp_left.values)
    hits = result.valid & (err < 1.0) & candidates
    return hits.sum() / candidates.sum()


def test_identical_images_match_at_zero_disparity(rng):
    img = rng.uniform(size=(32, 48))
    cfg = MatchConfig(cost="photometric", aggregation="none", d_min=0, d_max=16)
    result = match(img, img, cfg)
    assert not result.degenerate
    assert result.valid.all()
    assert np.all(result.disp_left.values == 0.0)
    assert np.all(result.disp_right.values == 0.0)


def test_constant_images_are_degenerate():
    img = np.full((16, 24), 0.4)
    result = match(img, img, MatchConfig(d_max=8))
    assert result.degenerate
    assert not result.valid.any()


def test_wall_is_matched_to_subpixel_accuracy(wall_pair, fast_config):
    result = match(wall_pair.left, wall_pair.right, fast_config)
    keep = result.valid & ~wall_pair.occlusion_left
    err = np.abs(result.disp_left.values - wall_pair.gt_disp_left.values)[keep]
    assert keep.sum() > 0.8 * (~wall_pair.occlusion_left).sum()
    assert np.mean(err < 1.0) >= 0.95
    assert np.mean(err) < 0.25


def test_raw_readouts_survive_invalidation(wall_pair, fast_config):
    result = match(wall_pair.left, wall_pair.right, fast_config)
    np.testing.assert_array_equal(result.raw_left.values, result.disp_left.values)
    assert np.all(result.raw_left.valid >= result.valid)
    # the left border strip fails the LR check but keeps its readout
    assert result.raw_left.valid[:, :20].mean() > result.valid[:, :20].mean()


def test_separable_aggregation_matches_the_wall(wall_pair):
    cfg = MatchConfig(asw=AswConfig(k=4, mode="separable"), d_min=0, d_max=40)
    result = match(wall_pair.left, wall_pair.right, cfg)
    keep = result.valid & ~wall_pair.occlusion_left
    err = np.abs(result.disp_left.values - wall_pair.gt_disp_left.values)[keep]
    assert _within_one_px(result, wall_pair) > 0.8
    assert np.mean(err) < 0.25


def test_wlcn_with_asw_beats_raw_photometric(wall_pair, fast_config):
    wlcn = match(wall_pair.left, wall_pair.right, fast_config)
    photometric = match(
        wall_pair.left,
        wall_pair.right,
        MatchConfig(cost="photometric", aggregation="none", d_min=0, d_max=40),
    )
    assert _within_one_px(wlcn, wall_pair) > _within_one_px(photometric, wall_pair)


def test_textureless_scene_is_invalidated_by_the_texture_floor(fast_config):
    pair = render_pair(textureless_scene(width=96, height=48))
    cfg = fast_config.model_copy(update={"min_texture": 0.02})
    result = match(pair.left, pair.right, cfg)
    assert result.valid.mean() <= 0.05


def test_textureless_scene_is_mostly_rejected_by_the_lr_check(fast_config):
    pair = render_pair(textureless_scene(width=96, height=48))
    result = match(pair.left, pair.right, fast_config)
    assert result.valid.mean() < 0.3


def test_texture_floor_is_off_by_default(wall_pair, fast_config):
    assert MatchConfig().min_texture == 0.0
    plain = match(wall_pair.left, wall_pair.right, fast_config)
    floored = match(
        wall_pair.left, wall_pair.right, fast_config.model_copy(update={"min_texture": 0.02})
    )
    low_contrast = local_stats(wall_pair.left, fast_config.lcn_radius).sigma < 0.02
    assert not floored.valid[low_contrast].any()
    np.testing.assert_array_equal(floored.valid, plain.valid & ~low_contrast)


def test_swapped_mirrored_pair_gives_the_mirrored_right_solution(wall_pair, fast_config):
    cfg = fast_config.model_copy(update={"asw": AswConfig(k=3)})
    forward = match(wall_pair.left, wall_pair.right, cfg)
    mirrored = match(wall_pair.right[:, ::-1].copy(), wall_pair.left[:, ::-1].copy(), cfg)
    np.testing.assert_array_equal(mirrored.valid, forward.disp_right.valid[:, ::-1])
    np.testing.assert_allclose(
        mirrored.disp_left.values, forward.disp_right.values[:, ::-1], atol=1e-9
    )


def test_match_is_identical_across_thread_counts(wall_pair, fast_config):
    single = match(wall_pair.left, wall_pair.right, fast_config, threads=1)
    multi = match(wall_pair.left, wall_pair.right, fast_config, threads=4)
    np.testing.assert_array_equal(single.disp_left.values, multi.disp_left.values)
    np.testing.assert_array_equal(single.valid, multi.valid)


def test_soft_argmin_readout_runs(wall_pair, fast_config):
    readout = ReadoutConfig(kind="soft_argmin", temperature=1e-3)
    cfg = fast_config.model_copy(update={"readout": readout})
    result = match(wall_pair.left, wall_pair.right, cfg)
    values = result.disp_left.values[result.valid]
    assert np.all((values >= 0) & (values <= 40))
    assert np.median(np.abs(values - 25.2)) < 0.5


def test_objective_gradient_matches_central_differences(rng):
    h = 1e-5
    for _ in range(100):
        left = rng.uniform(size=(16, 16))
        right = rng.uniform(size=(16, 16))
        terms = prepare_terms("wlcn", left, right, radius=2)
        objective = ReconstructionObjective(
            terms,
            left,
            intensity_scale=255.0,
            sigma_w=20.0,
            loss_mask=np.ones((16, 16), dtype=bool),
            smoothness=0.1,
            huber_delta=10.0,
        )
        # x = j - d stays inside the row and away from cell boundaries
        d = rng.integers(1, 4, size=(16, 16)) + rng.uniform(0.1, 0.9, size=(16, 16))
        _, grad = objective.value_and_grad(d, 2)
        for _ in range(3):
            i, j = rng.integers(0, 16), rng.integers(5, 16)
            up, down = d.copy(), d.copy()
            up[i, j] += h
            down[i, j] -= h
            fd = (objective.value(up, 2) - objective.value(down, 2)) / (2.0 * h)
            assert fd == pytest.approx(grad[i, j], rel=1e-5, abs=1e-8)


def test_plain_loss_gradient_without_aggregation(rng):
    left = rng.uniform(size=(8, 12))
    right = rng.uniform(size=(8, 12))
    terms = prepare_terms("photometric", left, right)
    objective = ReconstructionObjective(terms, left, 255.0, 2.0, np.ones((8, 12), dtype=bool))
    d = np.full((8, 12), 2.3)
    _, grad = objective.value_and_grad(d, 0)
    h = 1e-5
    up, down = d.copy(), d.copy()
    up[3, 7] += h
    down[3, 7] -= h
    fd = (objective.value(up, 0) - objective.value(down, 0)) / (2.0 * h)
    assert fd == pytest.approx(grad[3, 7], rel=1e-6)


def test_huber():
    x = np.array([-2.0, -0.25, 0.0, 0.25, 2.0])
    np.testing.assert_allclose(huber(x, 0.5), [0.875, 0.03125, 0.0, 0.03125, 0.875])
    np.testing.assert_allclose(huber_grad(x, 0.5), [-0.5, -0.25, 0.0, 0.25, 0.5])


def test_graduated_window_schedule():
    cfg = RefinementConfig(kind="gd", schedule="graduated", schedule_start=64, schedule_step=10)
    windows = [window_schedule(cfg, 16, it) for it in range(0, 80, 10)]
    assert windows == [32, 16, 8, 4, 2, 1, 0, 0]
    fixed = RefinementConfig(kind="gd")
    assert window_schedule(fixed, 16, 500) == 16


def _refine_config(**refinement):
    return MatchConfig(
        asw=AswConfig(k=4),
        d_min=0,
        d_max=40,
        refinement=RefinementConfig(kind="gd", **refinement),
    )


@pytest.fixture(scope="module")
def smooth_wall_pair():
    """Noiseless wall at 2.016 m, where the disparity is exactly 25 px

    At an integer disparity the linear sampler reproduces the reference
    exactly, so the per-pixel cost has its minimum at the ground truth.
    """
    return render_pair(small_wall(2.016, noise=NoiseSpec(sigma1=0.0, sigma2=0.0)))


def _interior_error(d, pair):
    err = np.abs(d.values - pair.gt_disp_left.values)
    return err[4:-4, 34:-4]


def test_smooth_wall_has_integer_disparity(smooth_wall_pair):
    np.testing.assert_allclose(smooth_wall_pair.gt_disp_left.values, 25.0, atol=1e-9)


def test_refinement_from_ground_truth_keeps_every_pixel(smooth_wall_pair):
    pair = smooth_wall_pair
    # Columns whose LCN windows are clipped by the border do not enter the loss
    valid = np.zeros(pair.shape, dtype=bool)
    valid[:, 34:-4] = True
    start = DisparityMap(pair.gt_disp_left.values, valid)
    result = refine_gd(pair.left, pair.right, start, _refine_config(steps=30))
    assert result.objective_best <= result.objective_init
    assert np.all(_interior_error(result.disparity, pair) <= 0.05)


def test_refinement_pulls_a_half_pixel_offset_back_to_ground_truth(smooth_wall_pair):
    pair = smooth_wall_pair
    start = DisparityMap(pair.gt_disp_left.values + 0.4)
    result = refine_gd(pair.left, pair.right, start, _refine_config(smoothness=0.0))
    err = _interior_error(result.disparity, pair)
    assert result.objective_best < result.objective_init
    assert np.mean(err <= 0.05) >= 0.95
    assert np.median(err) <= 0.025
    assert list(result.trace.columns) == ["iteration", "window", "objective", "max_step"]
    assert (result.trace["max_step"] <= 0.1 + 1e-12).all()


def test_refinement_with_smoothness_lowers_the_objective(smooth_wall_pair):
    pair = smooth_wall_pair
    start = DisparityMap(pair.gt_disp_left.values + 0.4)
    result = refine_gd(pair.left, pair.right, start, _refine_config(steps=40, smoothness=0.1))
    assert result.objective_best < result.objective_init
    assert np.median(_interior_error(result.disparity, pair)) <= 0.1


def test_learning_rate_steps_down():
    cfg = RefinementConfig(kind="gd", steps=100, learning_rate=0.08)
    rates = [learning_rate_at(cfg, it) for it in (0, 59, 60, 79, 80, 99)]
    assert rates == [0.08, 0.08, 0.04, 0.04, 0.02, 0.02]



def test_refinement_fills_invalid_pixels_but_keeps_their_mask(smooth_wall_pair):
    pair = smooth_wall_pair
    valid = np.ones(pair.shape, dtype=bool)
    valid[:, 50:52] = False
    start = DisparityMap(pair.gt_disp_left.values, valid)
    result = refine_gd(pair.left, pair.right, start, _refine_config(steps=3))
    np.testing.assert_array_equal(result.disparity.valid, valid)
    assert len(result.trace) == 3


def test_refinement_needs_valid_pixels(smooth_wall_pair):
    pair = smooth_wall_pair
    empty = DisparityMap(np.zeros(pair.shape), np.zeros(pair.shape, dtype=bool))
    with pytest.raises(InvalidParameterError):
        refine_gd(pair.left, pair.right, empty, _refine_config(steps=3))


def test_match_with_refinement_returns_a_trace(wall_pair):
    cfg = _refine_config(steps=5)
    result = match(wall_pair.left, wall_pair.right, cfg)
    assert result.trace is not None
    assert len(result.trace) == 5
    assert "refine_left" in result.diagnostics


def test_config_validation():
    with pytest.raises(ValidationError):
        MatchConfig(d_min=10, d_max=10)
    with pytest.raises(ValidationError):
        MatchConfig(cost="census")
    with pytest.raises(ValidationError):
        RefinementConfig(rms_decay=1.0)
