"""View-synthesis training losses with analytic gradients.

Every loss here is differentiated by hand with respect to the pose of each
frame pair (as a 6-vector in the left-multiplicative twist chart, i.e. the
gradient of ``L(exp(delta) @ T)`` at ``delta = 0``) and, when the depth
source is learnable, with respect to the per-frame depth-field parameters.
Central finite differences are the independent check for all of it (see
the trainer's gradient_check and the test suite).

Pixels whose warp lands outside the source image or behind the source
camera are masked out; all per-pair losses are means over the valid set,
so the number of masked pixels does not bias per-pixel magnitudes.  SSIM
statistics use count-normalized 3x3 windows restricted to the valid set,
which keeps border windows unbiased and keeps invalid synthesized values
out of the loss entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .depthfield import (
    bilinear_position_grad,
    bilinear_sample,
    bilinear_scatter,
)
from .geometry import CameraIntrinsics, Pose, inverse, se3_adjoint

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights; defaults follow the standard recipe."""

    l1_weight: float = 0.15          # photometric L1 term
    ssim_weight: float = 0.85        # photometric (1-SSIM)/2 term
    photo_weight: float = 1.0        # per-pair photometric weight in window sums
    gc_weight: float = 0.5           # per-pair geometric-consistency weight
    refine_weight: float = 1.0       # forward+backward term in the refine loss
    smooth_weight: float = 0.1       # smoothness term in the refine loss
    min_valid_fraction: float = 0.25
    smoothness_form: str = "gradient"  # "gradient" or "literal"

    def __post_init__(self):
        for name in ("l1_weight", "ssim_weight", "photo_weight", "gc_weight",
                     "refine_weight", "smooth_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.smoothness_form not in ("gradient", "literal"):
            raise ValueError("smoothness_form must be 'gradient' or 'literal'")


@dataclass
class LossBundle:
    """Scalar loss with gradients for every parameter block of a window.

    ``grad_twists`` has one row per adjacent frame pair, expressed in the
    left-increment chart of that pair's forward pose (also for backward
    losses, which are mapped back through the adjoint).  ``grad_depth_params``
    holds one coarse parameter-gradient grid per frame, or None when the
    depth source is fixed.  ``pair_masks`` echoes the validity set each
    pair was evaluated on (finite-difference checks re-evaluate the loss
    on exactly this set; the masked mean is discontinuous where the set
    changes, so the set must be pinned for differentiation).
    """

    value: float
    grad_twists: np.ndarray | None
    grad_depth_params: list | None
    valid_fraction: float
    components: dict = dataclass_field(default_factory=dict)
    pair_masks: object = None


@dataclass
class SequenceWindow:
    """A short run of consecutive frames plus the pair poses linking them.

    ``poses[i]`` maps frame-``i`` coordinates into frame ``i+1`` (target i,
    source i+1 in the forward direction).  Depths come either from
    ``coarse_depths`` (fixed metric-scaled maps) or from per-frame
    learnable ``fields``.
    """

    images: list
    intrinsics: CameraIntrinsics
    poses: list
    coarse_depths: list | None = None
    fields: list | None = None
    frame_indices: tuple | None = None

    @property
    def n_frames(self) -> int:
        return len(self.images)


class DegenerateWindowError(RuntimeError):
    """All pairs of a window fell below the valid-fraction threshold."""


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


_RAY_CACHE: dict = {}


def _rays(intr: CameraIntrinsics) -> np.ndarray:
    grid = _RAY_CACHE.get(intr)
    if grid is None:
        grid = intr.ray_grid()
        grid.setflags(write=False)
        _RAY_CACHE[intr] = grid
    return grid


def _box_sum(x: np.ndarray) -> np.ndarray:
    """3x3 neighborhood sum with zero padding (self-adjoint)."""
    p = np.pad(x, ((1, 1), (1, 1)))
    return (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
        + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
        + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    )


def _ssim_forward(a: np.ndarray, b: np.ndarray, w: np.ndarray):
    """Per-pixel SSIM of two single-channel images over weighted 3x3 windows.

    ``w`` selects which pixels participate in the window statistics; the
    means are normalized by the participating count so that constant
    inputs produce exact statistics at borders and next to masked pixels.
    """
    cnt = _box_sum(w)
    c = np.maximum(cnt, 1e-12)
    mu_a = _box_sum(w * a) / c
    mu_b = _box_sum(w * b) / c
    m_ab = _box_sum(w * a * b) / c
    m_aa = _box_sum(w * a * a) / c
    m_bb = _box_sum(w * b * b) / c
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    ctx = {"mu_a": mu_a, "mu_b": mu_b, "a1": a1, "a2": a2, "b1": b1, "b2": b2,
           "s": s, "c": c, "a": a, "b": b, "w": w}
    return s, ctx


def _ssim_backward(ctx, grad_s: np.ndarray) -> np.ndarray:
    """d(loss)/d(b) given per-pixel d(loss)/d(SSIM)."""
    mu_a, mu_b = ctx["mu_a"], ctx["mu_b"]
    a1, a2, b1, b2, s = ctx["a1"], ctx["a2"], ctx["b1"], ctx["b2"], ctx["s"]
    c, a, b, w = ctx["c"], ctx["a"], ctx["b"], ctx["w"]
    d_mu_b = 2.0 * mu_a * (a2 - a1) / (b1 * b2) - 2.0 * mu_b * s * (1.0 / b1 - 1.0 / b2)
    d_m_ab = 2.0 * a1 / (b1 * b2)
    d_m_bb = -s / b2
    return w * (
        _box_sum(grad_s * d_mu_b / c)
        + a * _box_sum(grad_s * d_m_ab / c)
        + 2.0 * b * _box_sum(grad_s * d_m_bb / c)
    )


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel SSIM grid of two images, values in [-1, 1].

    Inputs must share a shape; multichannel inputs get per-channel SSIM.
    3x3 windows, stabilizers C1=0.01^2 and C2=0.03^2 on [0, 1] intensities.
    """
    a3, b3 = _channels(a), _channels(b)
    if a3.shape != b3.shape:
        raise ValueError("ssim inputs must share a shape")
    w = np.ones(a3.shape[:2]) if mask is None else mask.astype(float)
    out = np.empty_like(a3)
    for ch in range(a3.shape[2]):
        out[..., ch], _ = _ssim_forward(a3[..., ch], b3[..., ch], w)
    return out if np.asarray(a).ndim == 3 else out[..., 0]


def _warp_forward(depth_t, pose, intr):
    """Warp the full target pixel grid into the source view."""
    rays = _rays(intr)
    p_t = depth_t[..., None] * rays
    p_s = p_t @ pose.rotation.T + pose.translation
    z = p_s[..., 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u_s = intr.fx * p_s[..., 0] / safe_z + intr.cx
    v_s = intr.fy * p_s[..., 1] / safe_z + intr.cy
    return p_s, z, safe_z, u_s, v_s, in_front


def synthesize(img_s, depth_t, pose: Pose, intr: CameraIntrinsics):
    """Warp a source image into the target view (the forward render).

    Returns ``(synth, mask, z_grid, pix_grid)``: the synthesized image, a
    validity mask (warp in front of the source camera and inside its
    bounds), the transformed target depths in the source frame, and the
    (H, W, 2) warped pixel coordinates.  Invalid pixels carry a zero in
    the synthesized image; the mask absorbs every failure mode.
    """
    img_s3 = _channels(img_s)
    depth_t = np.asarray(depth_t, dtype=float)
    _, z, _, u_s, v_s, in_front = _warp_forward(depth_t, pose, intr)
    vals, inside, _ = bilinear_sample(img_s3, u_s, v_s)
    mask = in_front & inside
    vals = np.where(mask[..., None], vals, 0.0)
    synth = vals if np.asarray(img_s).ndim == 3 else vals[..., 0]
    return synth, mask, z, np.stack([u_s, v_s], axis=-1)


@dataclass
class PixelLoss:
    """Masked-mean scalar loss with its gradient w.r.t. the varying input."""

    value: float
    grad: np.ndarray
    valid_fraction: float
    per_pixel: np.ndarray


def photometric_loss(img_t, synth, mask, weights: LossWeights = LossWeights()) -> PixelLoss:
    """L1 + (1-SSIM)/2 photometric penalty over the valid pixel set.

    The returned gradient is with respect to the synthesized image; the
    chain to pose and depth runs through the window losses below.
    """
    a3, b3 = _channels(img_t), _channels(synth)
    if a3.shape != b3.shape:
        raise ValueError("image dims must match")
    w = mask.astype(float)
    n_valid = w.sum()
    n_chan = a3.shape[2]
    if n_valid == 0:
        return PixelLoss(0.0, np.zeros_like(np.asarray(synth, dtype=float)), 0.0,
                         np.zeros(a3.shape[:2]))
    diff = a3 - b3
    l1_px = np.abs(diff).mean(axis=2)
    ssim_px = np.zeros(a3.shape[:2])
    ctxs = []
    for ch in range(n_chan):
        s, ctx = _ssim_forward(a3[..., ch], b3[..., ch], w)
        ssim_px += s / n_chan
        ctxs.append(ctx)
    per_pixel = weights.l1_weight * l1_px + weights.ssim_weight * (1.0 - ssim_px) / 2.0
    value = float((per_pixel * w).sum() / n_valid)

    g_px = w / n_valid
    grad = (g_px[..., None] * weights.l1_weight / n_chan) * (-np.sign(diff))
    g_ssim = g_px * (-0.5 * weights.ssim_weight / n_chan)
    for ch in range(n_chan):
        grad[..., ch] += _ssim_backward(ctxs[ch], g_ssim)
    if np.asarray(synth).ndim == 2:
        grad = grad[..., 0]
    return PixelLoss(value, grad, float(n_valid / w.size), per_pixel)


@dataclass
class DepthPairLoss:
    value: float
    grad_interp: np.ndarray
    grad_warped: np.ndarray
    valid_fraction: float
    per_pixel: np.ndarray


def gc_loss(d_interp, d_warped, mask) -> DepthPairLoss:
    """Geometric consistency: symmetric relative depth difference.

    ``d_interp`` is the source depth map sampled at the warped pixels and
    ``d_warped`` the transformed target depth; per-pixel values lie in
    [0, 1) for positive depths.
    """
    d_interp = np.asarray(d_interp, dtype=float)
    d_warped = np.asarray(d_warped, dtype=float)
    w = mask.astype(float)
    n_valid = w.sum()
    if n_valid == 0:
        return DepthPairLoss(0.0, np.zeros_like(d_interp), np.zeros_like(d_warped),
                             0.0, np.zeros_like(d_interp))
    if ((d_interp <= 0) & mask).any() or ((d_warped <= 0) & mask).any():
        raise ValueError("gc_loss requires positive depths on valid pixels")
    denom = np.where(mask, d_interp + d_warped, 1.0)
    absdiff = np.abs(d_interp - d_warped)
    per_pixel = np.where(mask, absdiff / denom, 0.0)
    value = float((per_pixel * w).sum() / n_valid)
    sgn = np.sign(d_interp - d_warped)
    g_px = w / n_valid
    grad_interp = g_px * (sgn * denom - absdiff) / (denom * denom)
    grad_warped = g_px * (-sgn * denom - absdiff) / (denom * denom)
    return DepthPairLoss(value, grad_interp, grad_warped,
                         float(n_valid / w.size), per_pixel)


@dataclass
class SmoothnessLoss:
    value: float
    grad_depth: np.ndarray


def _edge_weights(img3: np.ndarray):
    gx = np.abs(np.diff(img3, axis=1)).mean(axis=2)
    gy = np.abs(np.diff(img3, axis=0)).mean(axis=2)
    return np.exp(-gx), np.exp(-gy)


def smoothness_loss(depth, img, weights: LossWeights = LossWeights()) -> SmoothnessLoss:
    """Edge-aware depth smoothness.

    Default form penalizes forward differences of the mean-normalized
    depth, down-weighted across image edges, so doubling the depth map
    leaves the loss unchanged and the regularizer cannot fight the metric
    scale.  ``smoothness_form="literal"`` instead squares edge-weight
    times the raw depth value itself (no normalization), kept only for
    comparison runs.
    """
    depth = np.asarray(depth, dtype=float)
    img3 = _channels(img)
    if img3.shape[:2] != depth.shape:
        raise ValueError("image and depth dims must match")
    wx, wy = _edge_weights(img3)
    count = wx.size + wy.size

    if weights.smoothness_form == "literal":
        tx = wx * depth[:, :-1]
        ty = wy * depth[:-1, :]
        value = float(((tx ** 2).sum() + (ty ** 2).sum()) / count)
        grad = np.zeros_like(depth)
        grad[:, :-1] += 2.0 * wx * tx / count
        grad[:-1, :] += 2.0 * wy * ty / count
        return SmoothnessLoss(value, grad)

    mu = depth.mean()
    dn = depth / mu
    gx = np.diff(dn, axis=1)
    gy = np.diff(dn, axis=0)
    tx = wx * gx
    ty = wy * gy
    value = float(((tx ** 2).sum() + (ty ** 2).sum()) / count)

    g_dn = np.zeros_like(depth)
    cx = 2.0 * wx * tx / count
    g_dn[:, 1:] += cx
    g_dn[:, :-1] -= cx
    cy = 2.0 * wy * ty / count
    g_dn[1:, :] += cy
    g_dn[:-1, :] -= cy
    # normalization chain: dn = D / mean(D)
    grad = g_dn / mu - (g_dn * depth).sum() / (mu * mu * depth.size)
    return SmoothnessLoss(value, grad)


@dataclass
class _PairResult:
    pho: float
    gc: float
    valid_fraction: float
    degenerate: bool
    grad_twist: np.ndarray | None
    grad_depth_t: np.ndarray | None
    grad_depth_s: np.ndarray | None
    valid: np.ndarray | None = None


def _pair_terms(img_t, img_s, depth_t, depth_s, pose: Pose, intr: CameraIntrinsics,
                weights: LossWeights, w_pho: float, w_gc: float,
                want_pose_grad: bool, want_depth_grad: bool,
                fixed_valid: np.ndarray | None = None) -> _PairResult:
    """Photometric + GC loss of one (target, source) pair with gradients.

    Gradients are for the combined scalar ``w_pho * pho + w_gc * gc``:
    a 6-vector in the left-increment chart of ``pose`` and dense
    d(loss)/d(depth-map) grids for the target and source frames.
    ``fixed_valid`` pins the contributing pixel set (finite-difference
    probes must stay on one smooth branch of the masked mean).
    """
    img_t3, img_s3 = _channels(img_t), _channels(img_s)
    depth_t = np.asarray(depth_t, dtype=float)
    depth_s = np.asarray(depth_s, dtype=float)
    h, w_img = depth_t.shape
    n_chan = img_t3.shape[2]

    p_s, z, safe_z, u_s, v_s, in_front = _warp_forward(depth_t, pose, intr)
    synth, inside, ctx_img = bilinear_sample(img_s3, u_s, v_s)
    d_hat, _, ctx_d = bilinear_sample(depth_s, u_s, v_s)
    if fixed_valid is not None:
        valid = fixed_valid
    else:
        valid = in_front & inside & (d_hat > 0)
    n_valid = int(valid.sum())
    frac = n_valid / valid.size
    if frac < weights.min_valid_fraction:
        return _PairResult(0.0, 0.0, frac, True, None, None, None)

    wv = valid.astype(float)

    # photometric
    diff = img_t3 - synth
    l1_px = np.abs(diff).mean(axis=2)
    ssim_px = np.zeros((h, w_img))
    ctxs = []
    for ch in range(n_chan):
        s, ctx = _ssim_forward(img_t3[..., ch], synth[..., ch], wv)
        ssim_px += s / n_chan
        ctxs.append(ctx)
    pho_px = weights.l1_weight * l1_px + weights.ssim_weight * (1.0 - ssim_px) / 2.0
    pho = float((pho_px * wv).sum() / n_valid)

    # geometric consistency
    denom = np.where(valid, d_hat + z, 1.0)
    absdiff = np.abs(d_hat - z)
    gc = float(((absdiff / denom) * wv).sum() / n_valid)

    if not (want_pose_grad or want_depth_grad):
        return _PairResult(pho, gc, frac, False, None, None, None, valid)

    g_px_pho = (w_pho / n_valid) * wv
    g_px_gc = (w_gc / n_valid) * wv

    # d(total)/d(synth)
    grad_synth = (g_px_pho[..., None] * weights.l1_weight / n_chan) * (-np.sign(diff))
    g_ssim = g_px_pho * (-0.5 * weights.ssim_weight / n_chan)
    for ch in range(n_chan):
        grad_synth[..., ch] += _ssim_backward(ctxs[ch], g_ssim)

    # d(total)/d(d_hat), d(total)/d(z)
    sgn = np.sign(d_hat - z)
    denom2 = denom * denom
    grad_dhat = g_px_gc * (sgn * denom - absdiff) / denom2
    grad_z = g_px_gc * (-sgn * denom - absdiff) / denom2

    # chain through the bilinear sample positions
    dimg_du, dimg_dv = bilinear_position_grad(ctx_img)
    dd_du, dd_dv = bilinear_position_grad(ctx_d)
    g_u = (grad_synth * dimg_du).sum(axis=2) + grad_dhat * dd_du
    g_v = (grad_synth * dimg_dv).sum(axis=2) + grad_dhat * dd_dv

    # chain through the projection to the transformed point
    g_p = np.empty((h, w_img, 3))
    g_p[..., 0] = g_u * intr.fx / safe_z
    g_p[..., 1] = g_v * intr.fy / safe_z
    g_p[..., 2] = (
        -g_u * intr.fx * p_s[..., 0] / (safe_z * safe_z)
        - g_v * intr.fy * p_s[..., 1] / (safe_z * safe_z)
        + grad_z
    )

    grad_twist = None
    if want_pose_grad:
        gv = g_p.sum(axis=(0, 1))
        gw = np.cross(p_s, g_p).sum(axis=(0, 1))
        grad_twist = np.concatenate([gv, gw])

    grad_depth_t = grad_depth_s = None
    if want_depth_grad:
        r_ray = _rays(intr) @ pose.rotation.T
        grad_depth_t = (g_p * r_ray).sum(axis=2)
        grad_depth_s = bilinear_scatter(depth_s.shape, ctx_d, grad_dhat)

    return _PairResult(pho, gc, frac, False, grad_twist, grad_depth_t,
                       grad_depth_s, valid)


def _window_depths(window: SequenceWindow, depth_source: str):
    if depth_source == "coarse":
        if window.coarse_depths is None:
            raise ValueError("window carries no coarse depths")
        return list(window.coarse_depths)
    if depth_source == "learned":
        if window.fields is None:
            raise ValueError("window carries no depth fields")
        return [f.evaluate() for f in window.fields]
    raise ValueError("depth_source must be 'coarse' or 'learned'")


def _window_pairs(window: SequenceWindow, depth_source: str, direction: str,
                  weights: LossWeights, want_grads: bool, fixed_valid=None):
    """Shared pair loop for the forward and backward window losses.

    Returns the renormalized loss value, per-pair twist gradients in the
    forward chart, per-frame depth-MAP gradients (not yet chained into
    field parameters), the mean valid fraction, component sums and the
    per-pair validity masks.
    """
    n = window.n_frames
    if n < 2 or len(window.poses) != n - 1:
        raise ValueError("window needs n >= 2 frames and n-1 pair poses")
    depths = _window_depths(window, depth_source)
    want_depth = want_grads and depth_source == "learned"

    results = []
    for i in range(n - 1):
        if direction == "forward":
            t_idx, s_idx, pose = i, i + 1, window.poses[i]
        else:
            t_idx, s_idx, pose = i + 1, i, inverse(window.poses[i])
        results.append(
            _pair_terms(
                window.images[t_idx], window.images[s_idx],
                depths[t_idx], depths[s_idx], pose, window.intrinsics,
                weights, weights.photo_weight, weights.gc_weight,
                want_pose_grad=want_grads, want_depth_grad=want_depth,
                fixed_valid=None if fixed_valid is None else fixed_valid[i],
            )
        )

    good = [r for r in results if not r.degenerate]
    if not good:
        raise DegenerateWindowError(
            f"all {n - 1} pairs below valid fraction "
            f"{weights.min_valid_fraction}"
        )
    factor = (n - 1) / len(good)

    pho_sum = sum(r.pho for r in good)
    gc_sum = sum(r.gc for r in good)
    value = factor * (weights.photo_weight * pho_sum + weights.gc_weight * gc_sum)

    grad_twists = None
    grad_maps = None
    if want_grads:
        grad_twists = np.zeros((n - 1, 6))
        if want_depth:
            grad_maps = [np.zeros_like(np.asarray(d, dtype=float)) for d in depths]
        for i, r in enumerate(results):
            if r.degenerate:
                continue
            if direction == "forward":
                t_idx, s_idx = i, i + 1
                grad_twists[i] = factor * r.grad_twist
            else:
                t_idx, s_idx = i + 1, i
                # backward pairs warp with S = T^-1; map the gradient in
                # S's chart back to T's chart: d/d(delta) = -Ad(S)^T g_S
                ad = se3_adjoint(inverse(window.poses[i]))
                grad_twists[i] = -factor * (ad.T @ r.grad_twist)
            if want_depth:
                grad_maps[t_idx] += factor * r.grad_depth_t
                grad_maps[s_idx] += factor * r.grad_depth_s

    fractions = [r.valid_fraction for r in results]
    components = {
        "photometric": pho_sum,
        "gc": gc_sum,
        "pairs": n - 1,
        "degenerate_pairs": (n - 1) - len(good),
    }
    masks = [r.valid for r in results]
    return value, grad_twists, grad_maps, float(np.mean(fractions)), components, masks


def _backprop_maps(window: SequenceWindow, grad_maps):
    if grad_maps is None:
        return None
    return [f.backprop(g) for f, g in zip(window.fields, grad_maps)]


def forward_window_loss(window: SequenceWindow, depth_source: str = "coarse",
                        weights: LossWeights = LossWeights(),
                        want_grads: bool = True, fixed_valid=None) -> LossBundle:
    """Window sum of per-pair photometric + GC losses, target i, source i+1.

    With ``depth_source="coarse"`` the depths are fixed metric-scaled maps
    and carry no gradient (the coarse scale-recovery regime); "learned"
    evaluates each frame's depth field and chains gradients into its
    parameters.  Degenerate pairs are excluded and the total renormalized
    by pair count; a window with no usable pair raises
    DegenerateWindowError.
    """
    value, g_tw, g_maps, frac, comp, masks = _window_pairs(
        window, depth_source, "forward", weights, want_grads, fixed_valid)
    return LossBundle(value, g_tw, _backprop_maps(window, g_maps), frac, comp,
                      pair_masks=masks)


def backward_window_loss(window: SequenceWindow, depth_source: str = "coarse",
                         weights: LossWeights = LossWeights(),
                         want_grads: bool = True, fixed_valid=None) -> LossBundle:
    """Forward loss with each pair's target/source swapped and pose inverted.

    Twist gradients are still reported in the forward pose chart so both
    directions update the same parameters.
    """
    value, g_tw, g_maps, frac, comp, masks = _window_pairs(
        window, depth_source, "backward", weights, want_grads, fixed_valid)
    return LossBundle(value, g_tw, _backprop_maps(window, g_maps), frac, comp,
                      pair_masks=masks)


def refine_loss(window: SequenceWindow, weights: LossWeights = LossWeights(),
                want_grads: bool = True, fixed_valid=None) -> LossBundle:
    """Bi-directional loss on learned depths plus per-frame smoothness.

    ``fixed_valid``, when given, is a (forward_masks, backward_masks)
    pair pinning the per-pair pixel sets of both directions.
    """
    if window.fields is None:
        raise ValueError("refine_loss needs learnable depth fields")
    fv_f = fv_b = None
    if fixed_valid is not None:
        fv_f, fv_b = fixed_valid
    f_val, f_tw, f_maps, f_frac, f_comp, f_masks = _window_pairs(
        window, "learned", "forward", weights, want_grads, fv_f)
    b_val, b_tw, b_maps, b_frac, b_comp, b_masks = _window_pairs(
        window, "learned", "backward", weights, want_grads, fv_b)

    lam5, lam6 = weights.refine_weight, weights.smooth_weight
    smooth_total = 0.0
    grad_maps = None
    if want_grads:
        grad_maps = [lam5 * (fm + bm) for fm, bm in zip(f_maps, b_maps)]
    for i, field in enumerate(window.fields):
        sm = smoothness_loss(field.evaluate(), window.images[i], weights)
        smooth_total += sm.value
        if want_grads:
            grad_maps[i] += lam6 * sm.grad_depth

    value = lam5 * (f_val + b_val) + lam6 * smooth_total
    grad_twists = lam5 * (f_tw + b_tw) if want_grads else None
    components = {
        "forward": f_val,
        "backward": b_val,
        "smoothness": smooth_total,
        "photometric": f_comp["photometric"] + b_comp["photometric"],
        "gc": f_comp["gc"] + b_comp["gc"],
        "degenerate_pairs": f_comp["degenerate_pairs"] + b_comp["degenerate_pairs"],
    }
    return LossBundle(value, grad_twists, _backprop_maps(window, grad_maps),
                      0.5 * (f_frac + b_frac), components,
                      pair_masks=(f_masks, b_masks))
