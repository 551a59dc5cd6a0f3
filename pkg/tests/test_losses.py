import numpy as np
import pytest

from cfvo import geometry as geo
from cfvo import synth
from cfvo.depthfield import DepthField
from cfvo.losses import (
    SSIM_C1,
    SSIM_C2,
    DegenerateWindowError,
    LossWeights,
    SequenceWindow,
    backward_window_loss,
    forward_window_loss,
    gc_loss,
    photometric_loss,
    refine_loss,
    smoothness_loss,
    ssim,
    synthesize,
)

INTR = geo.CameraIntrinsics(fx=48.0, fy=48.0, cx=31.5, cy=23.5,
                            width=64, height=48)


def make_scene(frames=3, seed=5, **overrides):
    spec = synth.SyntheticSceneSpec(
        frames=frames, width=64, height=48, fx=48.0, fy=48.0,
        cx=31.5, cy=23.5, seed=seed, **overrides)
    return spec, synth.generate(spec)


def gt_pair_poses(frames):
    return [geo.compose(geo.inverse(frames[i + 1].pose), frames[i].pose)
            for i in range(len(frames) - 1)]


# -- ssim -----------------------------------------------------------------------

def test_ssim_self_is_one_everywhere():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (12, 16))
    assert np.abs(ssim(img, img) - 1.0).max() < 1e-12


def test_ssim_symmetry():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (12, 16))
    b = rng.uniform(0, 1, (12, 16))
    assert np.abs(ssim(a, b) - ssim(b, a)).max() < 1e-12


def test_ssim_constant_patch_matches_closed_form():
    # hand-computed scalar: constants 0.5 vs 0.25, all variances zero
    a = np.full((3, 3), 0.5)
    b = np.full((3, 3), 0.25)
    mu_a, mu_b = 0.5, 0.25
    expected = ((2 * mu_a * mu_b + SSIM_C1) * (0.0 + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (0.0 + SSIM_C2))
    got = ssim(a, b)
    assert np.abs(got - expected).max() < 1e-14


def test_ssim_range():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (20, 20))
    b = rng.uniform(0, 1, (20, 20))
    s = ssim(a, b)
    assert s.min() >= -1.0 - 1e-12 and s.max() <= 1.0 + 1e-12


def test_ssim_multichannel_shape():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (8, 9, 3))
    assert ssim(a, a).shape == (8, 9, 3)


# -- synthesize ------------------------------------------------------------------

def test_synthesize_identity_pose_reproduces_source():
    _, frames = make_scene(frames=1)
    img = frames[0].image
    depth = frames[0].depth
    out, mask, z, pix = synthesize(img, depth, geo.Pose.identity(), INTR)
    assert mask.all()
    assert np.abs(out - img).max() < 1e-12
    assert np.array_equal(z, depth)
    uu, vv = np.meshgrid(np.arange(64.0), np.arange(48.0))
    assert np.abs(pix[..., 0] - uu).max() < 1e-9
    assert np.abs(pix[..., 1] - vv).max() < 1e-9


def test_synthesize_all_out_of_view():
    _, frames = make_scene(frames=1)
    pose = geo.Pose(np.eye(3), np.array([100.0, 0.0, 0.0]))
    _, mask, _, _ = synthesize(frames[0].image, frames[0].depth, pose, INTR)
    assert mask.sum() == 0


def test_synthesize_ground_truth_reproduces_target():
    spec, frames = make_scene(frames=2)
    pose = gt_pair_poses(frames)[0]
    out, mask, _, _ = synthesize(frames[1].image, frames[0].depth, pose, INTR)
    err = np.abs(out - frames[0].image)[mask]
    assert err.mean() < 1e-3


# -- photometric -----------------------------------------------------------------

def test_photometric_zero_for_identical_images():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (10, 12))
    res = photometric_loss(img, img.copy(), np.ones((10, 12), bool))
    assert res.value == 0.0
    assert res.valid_fraction == 1.0


def test_photometric_constant_offset_closed_form():
    w = LossWeights()
    a = np.full((9, 9), 0.5)
    b = np.full((9, 9), 0.6)
    res = photometric_loss(a, b, np.ones((9, 9), bool), w)
    s = ((2 * 0.5 * 0.6 + SSIM_C1) * SSIM_C2) / (
        (0.25 + 0.36 + SSIM_C1) * SSIM_C2)
    expected = w.l1_weight * 0.1 + w.ssim_weight * (1.0 - s) / 2.0
    assert abs(res.value - expected) < 1e-12


def test_photometric_masked_mean_is_unbiased():
    # half-masked constant-error image scores the same as unmasked
    a = np.full((10, 10), 0.3)
    b = np.full((10, 10), 0.45)
    full = photometric_loss(a, b, np.ones((10, 10), bool)).value
    half_mask = np.zeros((10, 10), bool)
    half_mask[:, :5] = True
    half = photometric_loss(a, b, half_mask).value
    assert abs(full - half) < 1e-12


def test_photometric_gradient_matches_fd():
    rng = np.random.default_rng(5)
    a = rng.uniform(0.2, 0.8, (8, 8))
    b = np.clip(a + rng.normal(0, 0.05, (8, 8)), 0, 1)
    mask = np.ones((8, 8), bool)
    res = photometric_loss(a, b, mask)
    step = 1e-6
    for _ in range(25):
        i, j = rng.integers(0, 8, 2)
        saved = b[i, j]
        b[i, j] = saved + step
        up = photometric_loss(a, b, mask).value
        b[i, j] = saved - step
        down = photometric_loss(a, b, mask).value
        b[i, j] = saved
        fd = (up - down) / (2 * step)
        assert abs(res.grad[i, j] - fd) < 1e-3 * max(abs(fd), abs(res.grad[i, j]), 1e-7)


# -- geometric consistency ---------------------------------------------------------

def test_gc_zero_for_consistent_depths():
    depth = np.full((6, 6), 5.0)
    res = gc_loss(depth, depth.copy(), np.ones((6, 6), bool))
    assert res.value == 0.0


def test_gc_three_to_one_ratio_gives_half():
    z = np.full((6, 6), 2.0)
    res = gc_loss(3.0 * z, z, np.ones((6, 6), bool))
    assert abs(res.value - 0.5) < 1e-12


def test_gc_per_pixel_range():
    rng = np.random.default_rng(6)
    a = rng.uniform(0.5, 50.0, (15, 15))
    b = rng.uniform(0.5, 50.0, (15, 15))
    res = gc_loss(a, b, np.ones((15, 15), bool))
    assert res.per_pixel.min() >= 0.0
    assert res.per_pixel.max() < 1.0


def test_gc_gradient_matches_fd():
    rng = np.random.default_rng(7)
    a = rng.uniform(2.0, 8.0, (7, 7))
    b = rng.uniform(2.0, 8.0, (7, 7))
    mask = np.ones((7, 7), bool)
    res = gc_loss(a, b, mask)
    step = 1e-6
    for _ in range(25):
        i, j = rng.integers(0, 7, 2)
        for arr, grad in ((a, res.grad_interp), (b, res.grad_warped)):
            saved = arr[i, j]
            arr[i, j] = saved + step
            up = gc_loss(a, b, mask).value
            arr[i, j] = saved - step
            down = gc_loss(a, b, mask).value
            arr[i, j] = saved
            fd = (up - down) / (2 * step)
            assert abs(grad[i, j] - fd) < 1e-3 * max(abs(fd), 1e-7)


def test_gc_requires_positive_depths():
    bad = np.full((4, 4), -1.0)
    good = np.full((4, 4), 2.0)
    with pytest.raises(ValueError):
        gc_loss(bad, good, np.ones((4, 4), bool))


# -- smoothness ---------------------------------------------------------------------

def test_smoothness_constant_depth_is_zero():
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (6, 8))
    res = smoothness_loss(np.full((6, 8), 7.0), img)
    assert res.value == 0.0


def test_smoothness_linear_ramp_closed_form():
    # constant image (unit edge weights), depth = c0 + c1 * x on a 4x4 grid:
    # x-differences of normalized depth are all c1/mean, y-differences zero,
    # so the loss is 12 * (c1/mean)^2 / 24
    img = np.full((4, 4), 0.5)
    c0, c1 = 5.0, 0.25
    x = np.arange(4.0)
    depth = np.tile(c0 + c1 * x, (4, 1))
    mean = depth.mean()
    expected = 12.0 * (c1 / mean) ** 2 / 24.0
    res = smoothness_loss(depth, img)
    assert abs(res.value - expected) < 1e-15


def test_smoothness_scale_invariance():
    rng = np.random.default_rng(9)
    img = rng.uniform(0, 1, (10, 10))
    depth = rng.uniform(2, 9, (10, 10))
    a = smoothness_loss(depth, img).value
    b = smoothness_loss(2.0 * depth, img).value
    assert abs(a - b) < 1e-14


def test_smoothness_literal_form_depends_on_scale():
    w = LossWeights(smoothness_form="literal")
    rng = np.random.default_rng(10)
    img = rng.uniform(0, 1, (10, 10))
    depth = rng.uniform(2, 9, (10, 10))
    a = smoothness_loss(depth, img, w).value
    b = smoothness_loss(2.0 * depth, img, w).value
    assert b > 2.0 * a  # quadratic in the raw depth value


def test_smoothness_gradient_matches_fd():
    rng = np.random.default_rng(11)
    img = rng.uniform(0, 1, (8, 8))
    for form in ("gradient", "literal"):
        w = LossWeights(smoothness_form=form)
        depth = rng.uniform(2, 9, (8, 8))
        res = smoothness_loss(depth, img, w)
        step = 1e-6
        for _ in range(20):
            i, j = rng.integers(0, 8, 2)
            saved = depth[i, j]
            depth[i, j] = saved + step
            up = smoothness_loss(depth, img, w).value
            depth[i, j] = saved - step
            down = smoothness_loss(depth, img, w).value
            depth[i, j] = saved
            fd = (up - down) / (2 * step)
            assert abs(res.grad_depth[i, j] - fd) < 1e-4 * max(abs(fd), 1e-8)


# -- window losses --------------------------------------------------------------------

def make_window(frames, poses=None, fields=False, field_noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    if poses is None:
        poses = gt_pair_poses(frames)
    flds = None
    if fields:
        flds = []
        for f in frames:
            fl = DepthField(48, 64, stride=8)
            target = f.depth * (1 + field_noise * rng.standard_normal(f.depth.shape))
            fl.fit(target)
            flds.append(fl)
    return SequenceWindow(
        images=[f.image for f in frames],
        intrinsics=INTR,
        poses=list(poses),
        coarse_depths=[f.depth for f in frames],
        fields=flds,
    )


def test_ground_truth_losses_are_tiny_on_oracle_scene():
    spec = synth.oracle_scene_spec(frames=3, width=64, height=48, fx=48.0,
                                   fy=48.0, cx=31.5, cy=23.5, seed=3)
    frames = synth.generate(spec)
    win = make_window(frames)
    fwd = forward_window_loss(win, "coarse")
    bwd = backward_window_loss(win, "coarse")
    n_pairs = fwd.components["pairs"]
    assert fwd.components["photometric"] / n_pairs < 1e-5
    assert fwd.components["gc"] / n_pairs < 1e-5
    assert bwd.components["photometric"] / n_pairs < 1e-5
    assert bwd.components["gc"] / n_pairs < 1e-5


def test_two_frame_window_reduces_to_single_pair():
    _, frames = make_scene(frames=2)
    win = make_window(frames)
    w = LossWeights()
    bundle = forward_window_loss(win, "coarse", w)
    expected = (w.photo_weight * bundle.components["photometric"]
                + w.gc_weight * bundle.components["gc"])
    assert abs(bundle.value - expected) < 1e-15
    assert bundle.grad_twists.shape == (1, 6)


def test_window_loss_equals_sum_of_pair_losses():
    _, frames = make_scene(frames=4)
    win = make_window(frames)
    whole = forward_window_loss(win, "coarse")
    total = 0.0
    for i in range(3):
        sub = SequenceWindow(images=win.images[i:i + 2], intrinsics=INTR,
                             poses=[win.poses[i]],
                             coarse_depths=win.coarse_depths[i:i + 2])
        total += forward_window_loss(sub, "coarse").value
    assert abs(whole.value - total) < 1e-12


def test_backward_equals_forward_of_reversed_window():
    _, frames = make_scene(frames=4)
    win = make_window(frames)
    bwd = backward_window_loss(win, "coarse")
    reversed_win = SequenceWindow(
        images=win.images[::-1], intrinsics=INTR,
        poses=[geo.inverse(p) for p in win.poses[::-1]],
        coarse_depths=win.coarse_depths[::-1])
    fwd = forward_window_loss(reversed_win, "coarse")
    assert abs(bwd.value - fwd.value) < 1e-12


def test_refine_reduces_to_bidirectional_sum_without_smoothness():
    _, frames = make_scene(frames=3)
    win = make_window(frames, fields=True, field_noise=0.02)
    w = LossWeights(smooth_weight=0.0)
    ref = refine_loss(win, w)
    fwd = forward_window_loss(win, "learned", w)
    bwd = backward_window_loss(win, "learned", w)
    assert abs(ref.value - (fwd.value + bwd.value)) < 1e-12
    assert np.abs(ref.grad_twists - (fwd.grad_twists + bwd.grad_twists)).max() < 1e-12


def test_refine_gradient_is_sum_of_component_gradients():
    _, frames = make_scene(frames=3)
    win = make_window(frames, fields=True, field_noise=0.02)
    w = LossWeights()
    ref = refine_loss(win, w)
    fwd = forward_window_loss(win, "learned", w)
    bwd = backward_window_loss(win, "learned", w)
    for i, field in enumerate(win.fields):
        sm = smoothness_loss(field.evaluate(), win.images[i], w)
        expected = (w.refine_weight
                    * (fwd.grad_depth_params[i] + bwd.grad_depth_params[i])
                    + w.smooth_weight * field.backprop(sm.grad_depth))
        assert np.abs(ref.grad_depth_params[i] - expected).max() < 1e-12


def test_refine_near_zero_at_ground_truth_on_oracle_scene():
    spec = synth.oracle_scene_spec(frames=3, width=64, height=48, fx=48.0,
                                   fy=48.0, cx=31.5, cy=23.5, seed=6)
    frames = synth.generate(spec)
    win = make_window(frames, fields=True, field_noise=0.0)
    ref = refine_loss(win, LossWeights(smooth_weight=0.0))
    # field fit error adds a little on top of interpolation error
    assert ref.value < 5e-4


def test_degenerate_pair_renormalization():
    _, frames = make_scene(frames=3)
    # push the middle pair out of view: pair 0 valid, pair 1 degenerate
    poses = gt_pair_poses(frames)
    poses[1] = geo.Pose(np.eye(3), np.array([100.0, 0.0, 0.0]))
    win = make_window(frames, poses=poses)
    bundle = forward_window_loss(win, "coarse")
    assert bundle.components["degenerate_pairs"] == 1
    sub = SequenceWindow(images=win.images[:2], intrinsics=INTR,
                         poses=[win.poses[0]],
                         coarse_depths=win.coarse_depths[:2])
    single = forward_window_loss(sub, "coarse")
    # renormalized: the surviving pair is scaled up to the full pair count
    assert abs(bundle.value - 2.0 * single.value) < 1e-12
    assert np.abs(bundle.grad_twists[1]).max() == 0.0


def test_all_pairs_degenerate_raises():
    _, frames = make_scene(frames=3)
    bad = geo.Pose(np.eye(3), np.array([100.0, 0.0, 0.0]))
    win = make_window(frames, poses=[bad, bad])
    with pytest.raises(DegenerateWindowError):
        forward_window_loss(win, "coarse")


def test_window_needs_matching_pose_count():
    _, frames = make_scene(frames=3)
    win = make_window(frames)
    win.poses = win.poses[:1]
    with pytest.raises(ValueError):
        forward_window_loss(win, "coarse")


def test_valid_fraction_reported():
    _, frames = make_scene(frames=2)
    win = make_window(frames)
    bundle = forward_window_loss(win, "coarse")
    assert 0.8 < bundle.valid_fraction <= 1.0


def test_all_losses_are_non_negative():
    rng = np.random.default_rng(12)
    for seed in range(5):
        _, frames = make_scene(frames=3, seed=seed)
        poses = [geo.compose(geo.se3_exp(rng.normal(0, 0.02, 6)), p)
                 for p in gt_pair_poses(frames)]
        win = make_window(frames, poses=poses, fields=True, field_noise=0.05,
                          seed=seed)
        assert forward_window_loss(win, "coarse").value >= 0.0
        assert forward_window_loss(win, "learned").value >= 0.0
        assert backward_window_loss(win, "learned").value >= 0.0
        assert refine_loss(win).value >= 0.0
        sm = smoothness_loss(win.fields[0].evaluate(), win.images[0])
        assert sm.value >= 0.0
