"""Two-stage direct optimization of pose twists and depth fields.

Stage 1 recovers metric-scale relative poses by minimizing the forward
window loss against fixed scale-calibrated coarse depths.  Stage 2 fits a
learnable depth field per frame to those coarse depths and then jointly
refines poses and depth parameters with the bi-directional loss.  Stage 2
never sees LiDAR projections or scale factors; the metric scale survives
purely through the learned state handed over from stage 1.

Everything is deterministic under a fixed seed: window order is drawn
from a per-epoch generator seeded by (seed, stage, epoch), windows are
processed sequentially, and updates are applied in that order.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .depthfield import DepthField, bilinear_sample
from .geometry import CameraIntrinsics, compose, inverse, se3_exp, se3_log
from .losses import (
    DegenerateWindowError,
    LossWeights,
    SequenceWindow,
    backward_window_loss,
    forward_window_loss,
    refine_loss,
    smoothness_loss,
    synthesize,
)

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training loss blew up; carries the loss history for diagnostics."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Defaults are desk-scale; the full-scale recipe this follows trains
    ~200 epochs of 1000 windows with stage learning rates 1e-4 and 1e-5.
    ``stage1_epochs`` caps stage 1 (the quantified switch rule below may
    end it earlier, but never before ``min_stage1_epochs``).
    """

    window_length: int = 5
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    stage1_epochs: int = 40
    min_stage1_epochs: int = 10
    total_epochs: int = 60
    sequences_per_epoch: int = 50
    switch_window: int = 5
    switch_tol: float = 0.01
    divergence_factor: float = 10.0
    divergence_patience: int = 5
    depth_stride: int = 8
    disp_min: float = 0.01
    disp_max: float = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.window_length < 2:
            raise ValueError("window_length must be at least 2")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class SequenceData:
    """One training sequence: images plus optional coarse metric depths."""

    images: list
    intrinsics: CameraIntrinsics
    coarse_depths: list | None = None

    @property
    def n_frames(self) -> int:
        return len(self.images)


class Adam:
    """Bias-corrected Adam over named parameter blocks.

    Each block keeps its own moment accumulators and step counter, so a
    block only advances when its window is visited.  A non-finite
    gradient rejects the step for that block and counts an incident.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments = {}
        self.incidents = 0

    def step(self, key, grad: np.ndarray, lr: float):
        """Additive update for one block, or None if the step is rejected."""
        grad = np.asarray(grad, dtype=float)
        if not np.isfinite(grad).all():
            self.incidents += 1
            return None
        slot = self.moments.get(key)
        if slot is None:
            slot = {"m": np.zeros_like(grad), "v": np.zeros_like(grad), "t": 0}
            self.moments[key] = slot
        slot["t"] += 1
        slot["m"] = self.beta1 * slot["m"] + (1.0 - self.beta1) * grad
        slot["v"] = self.beta2 * slot["v"] + (1.0 - self.beta2) * grad * grad
        m_hat = slot["m"] / (1.0 - self.beta1 ** slot["t"])
        v_hat = slot["v"] / (1.0 - self.beta2 ** slot["t"])
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {
            k: {"m": s["m"].tolist(), "v": s["v"].tolist(), "t": s["t"]}
            for k, s in self.moments.items()
        }

    def load_state_dict(self, state):
        self.moments = {
            k: {"m": np.array(s["m"]), "v": np.array(s["v"]), "t": int(s["t"])}
            for k, s in state.items()
        }


def adam_step(adam: Adam, key, params: np.ndarray, grad: np.ndarray, lr: float):
    """Apply one Adam update to a plain parameter array."""
    update = adam.step(key, grad, lr)
    return params if update is None else params + update


def apply_twist_update(twist: np.ndarray, update: np.ndarray) -> np.ndarray:
    """Left-multiplicative pose update in twist storage: exp(u) * exp(xi)."""
    return se3_log(compose(se3_exp(update), se3_exp(twist)))


@dataclass
class StageResult:
    twists: np.ndarray
    fields: list | None
    epoch_losses: list
    translation_norms: list
    epochs_run: int
    switched: bool
    incidents: int
    skipped_windows: int
    adam: Adam | None = None

    def pair_poses(self):
        return [se3_exp(t) for t in self.twists]


def _window_starts(n_frames: int, window_length: int):
    if n_frames < window_length:
        raise ValueError(
            f"sequence of {n_frames} frames is shorter than the window "
            f"({window_length})")
    return np.arange(n_frames - window_length + 1)


def _epoch_order(config: TrainConfig, stage: int, epoch: int, n_starts: int):
    rng = np.random.default_rng([config.seed, stage, epoch])
    order = rng.permutation(n_starts)
    return order[: min(config.sequences_per_epoch, n_starts)]


def _check_divergence(epoch_losses, config: TrainConfig):
    if len(epoch_losses) <= config.divergence_patience:
        return
    limit = config.divergence_factor * epoch_losses[0]
    recent = epoch_losses[-config.divergence_patience:]
    if all(v > limit for v in recent):
        raise DivergenceError(
            f"loss above {config.divergence_factor}x the initial value for "
            f"{config.divergence_patience} epochs", epoch_losses)


def stage_switch(config: TrainConfig, translation_norms) -> bool:
    """Quantified stage-1 exit rule.

    True once the mean per-pair translation norm has changed by less than
    ``switch_tol`` (relative) over the last ``switch_window`` epochs, or
    when the epoch cap is reached; never before ``min_stage1_epochs``.
    """
    n = len(translation_norms)
    if n >= config.stage1_epochs:
        return True
    if n < max(config.min_stage1_epochs, config.switch_window + 1):
        return False
    recent = np.asarray(translation_norms[-(config.switch_window + 1):])
    scale = max(abs(recent[-1]), 1e-12)
    return float(recent.max() - recent.min()) / scale < config.switch_tol


def _stage_loop(data: SequenceData, config: TrainConfig, stage: int,
                twists: np.ndarray, fields, lr: float, max_epochs: int,
                loss_fn, use_switch_rule: bool, resume: dict | None = None):
    """Shared epoch/window loop; mutates twists (and fields) in place.

    ``resume`` restores optimizer state and logs from a checkpoint; the
    per-epoch window order is derived from (seed, stage, epoch), so a
    resumed run continues bit-identically to an uninterrupted one.
    """
    n = data.n_frames
    wl = config.window_length
    starts = _window_starts(n, wl)
    adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    epoch_losses = []
    translation_norms = []
    skipped = 0
    start_epoch = 0
    if resume is not None:
        adam.load_state_dict(resume.get("adam") or {})
        adam.incidents = int(resume.get("incidents", 0))
        epoch_losses = list(resume.get("epoch_losses", []))
        translation_norms = list(resume.get("translation_norms", []))
        skipped = int(resume.get("skipped_windows", 0))
        start_epoch = int(resume.get("epoch", 0))
    epochs_run = start_epoch
    switched = False

    for epoch in range(start_epoch, max_epochs):
        order = _epoch_order(config, stage, epoch, len(starts))
        window_losses = []
        for s in (int(starts[i]) for i in order):
            poses = [se3_exp(twists[i]) for i in range(s, s + wl - 1)]
            window = SequenceWindow(
                images=data.images[s: s + wl],
                intrinsics=data.intrinsics,
                poses=poses,
                coarse_depths=None if data.coarse_depths is None
                else data.coarse_depths[s: s + wl],
                fields=None if fields is None else fields[s: s + wl],
                frame_indices=tuple(range(s, s + wl)),
            )
            try:
                bundle = loss_fn(window)
            except DegenerateWindowError:
                skipped += 1
                continue
            window_losses.append(bundle.value)
            for k in range(wl - 1):
                update = adam.step(f"twist:{s + k}", bundle.grad_twists[k], lr)
                if update is not None:
                    twists[s + k] = apply_twist_update(twists[s + k], update)
            if fields is not None and bundle.grad_depth_params is not None:
                for k in range(wl):
                    update = adam.step(
                        f"field:{s + k}", bundle.grad_depth_params[k], lr)
                    if update is not None:
                        fields[s + k].params = fields[s + k].params + update
        if not window_losses:
            raise DegenerateWindowError("every window in the epoch was degenerate")
        epoch_losses.append(float(np.mean(window_losses)))
        translation_norms.append(float(np.mean(np.linalg.norm(twists[:, :3], axis=1))))
        epochs_run = epoch + 1
        _check_divergence(epoch_losses, config)
        if use_switch_rule and stage_switch(config, translation_norms):
            switched = len(translation_norms) < config.stage1_epochs
            break

    return StageResult(
        twists=twists, fields=fields, epoch_losses=epoch_losses,
        translation_norms=translation_norms, epochs_run=epochs_run,
        switched=switched, incidents=adam.incidents, skipped_windows=skipped,
        adam=adam)


def run_stage1(data: SequenceData, config: TrainConfig,
               resume: dict | None = None) -> StageResult:
    """Coarse scale recovery: pose twists only, against fixed coarse depths."""
    if data.coarse_depths is None:
        raise ValueError("stage 1 needs coarse metric depths")
    if resume is not None:
        twists = np.array(resume["twists"], dtype=float)
    else:
        twists = np.zeros((data.n_frames - 1, 6))
    return _stage_loop(
        data, config, stage=1, twists=twists, fields=None,
        lr=config.stage1_lr, max_epochs=config.stage1_epochs,
        loss_fn=lambda w: forward_window_loss(w, "coarse", config.weights),
        use_switch_rule=True, resume=resume)


def init_fields(data: SequenceData, config: TrainConfig) -> list:
    """Per-frame depth fields least-squares fitted to the coarse depths.

    The fit preserves the recovered metric scale at the stage hand-off.
    """
    if data.coarse_depths is None:
        raise ValueError("field initialization needs coarse depths")
    h, w = data.coarse_depths[0].shape
    fields = []
    for depth in data.coarse_depths:
        f = DepthField(h, w, stride=config.depth_stride,
                       disp_min=config.disp_min, disp_max=config.disp_max)
        f.fit(depth)
        fields.append(f)
    return fields


def run_stage2(data: SequenceData, config: TrainConfig,
               stage1: StageResult, fields: list | None = None,
               resume: dict | None = None) -> StageResult:
    """Bi-directional coarse-to-fine refinement of poses and depth fields.

    Consumes only images and the stage-1 state (plus coarse depths once,
    to initialize the fields); LiDAR projections and scale factors are
    out of reach by construction.
    """
    if resume is not None:
        fields = resume["fields"]
        twists = np.array(resume["twists"], dtype=float)
    else:
        if fields is None:
            fields = init_fields(data, config)
        twists = stage1.twists.copy()
    epochs = max(1, config.total_epochs - stage1.epochs_run)
    return _stage_loop(
        data, config, stage=2, twists=twists, fields=fields,
        lr=config.stage2_lr, max_epochs=epochs,
        loss_fn=lambda w: refine_loss(w, config.weights),
        use_switch_rule=False, resume=resume)


def run_pipeline(data: SequenceData, config: TrainConfig):
    """Stage 1 followed by stage 2; returns (stage1, stage2) results."""
    stage1 = run_stage1(data, config)
    stage2 = run_stage2(data, config, stage1)
    return stage1, stage2


def _bidirectional_coarse(window, weights: LossWeights):
    f = forward_window_loss(window, "coarse", weights)
    b = backward_window_loss(window, "coarse", weights)
    f.value = weights.refine_weight * (f.value + b.value)
    f.grad_twists = weights.refine_weight * (f.grad_twists + b.grad_twists)
    f.valid_fraction = 0.5 * (f.valid_fraction + b.valid_fraction)
    return f


def run_single_stage_ablation(data: SequenceData, config: TrainConfig,
                              mode: str):
    """Degraded training regimes used to probe the two-stage design.

    ``fixed_supervision`` runs the usual schedule but keeps the fixed
    coarse depths as supervision in the refinement phase instead of
    switching to learnable depths.  ``no_supervision`` skips calibration
    entirely and jointly optimizes poses and default-initialized depth
    fields with the bi-directional loss; nothing pins the metric scale,
    so none is expected.
    """
    if mode == "fixed_supervision":
        stage1 = run_stage1(data, config)
        epochs = max(1, config.total_epochs - stage1.epochs_run)
        twists = stage1.twists.copy()
        result = _stage_loop(
            data, config, stage=2, twists=twists, fields=None,
            lr=config.stage2_lr, max_epochs=epochs,
            loss_fn=lambda w: _bidirectional_coarse(w, config.weights),
            use_switch_rule=False)
        return result
    if mode == "no_supervision":
        h, w = np.asarray(data.images[0], dtype=float).shape[:2]
        fields = [
            DepthField(h, w, stride=config.depth_stride,
                       disp_min=config.disp_min, disp_max=config.disp_max)
            for _ in range(data.n_frames)
        ]
        twists = np.zeros((data.n_frames - 1, 6))
        return _stage_loop(
            data, config, stage=2, twists=twists, fields=fields,
            lr=config.stage1_lr, max_epochs=config.total_epochs,
            loss_fn=lambda w: refine_loss(w, config.weights),
            use_switch_rule=False)
    raise ValueError("mode must be 'fixed_supervision' or 'no_supervision'")


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    selector: str
    n_checked: int
    n_failed: int
    max_rel_error: float
    median_rel_error: float
    offenders: list

    @property
    def passed(self) -> bool:
        return self.n_failed == 0

    @property
    def pass_fraction(self) -> float:
        if self.n_checked == 0:
            return 1.0
        return 1.0 - self.n_failed / self.n_checked

    def to_dict(self):
        return asdict(self)


_CHECK_WEIGHTS = {
    "photometric": lambda w: LossWeights(
        l1_weight=w.l1_weight, ssim_weight=w.ssim_weight,
        photo_weight=1.0, gc_weight=0.0,
        min_valid_fraction=w.min_valid_fraction),
    "gc": lambda w: LossWeights(
        l1_weight=w.l1_weight, ssim_weight=w.ssim_weight,
        photo_weight=0.0, gc_weight=1.0,
        min_valid_fraction=w.min_valid_fraction),
}


def _branch_masks(window: SequenceWindow, direction: str, weights: LossWeights,
                  cell_margin: float, gc_margin: float, l1_margin: float):
    """Validity sets pinned to one smooth branch of the loss.

    Besides out-of-view pixels this excludes warps within ``cell_margin``
    pixels of a bilinear cell line and pixels near the kinks of the two
    absolute values (|interp source depth - warped depth| and the L1
    image residual), where a finite-difference probe would step across a
    non-differentiable point.
    """
    depths = ([f.evaluate() for f in window.fields]
              if window.fields is not None else list(window.coarse_depths))
    masks = []
    for i in range(window.n_frames - 1):
        if direction == "forward":
            t, s, pose = i, i + 1, window.poses[i]
        else:
            t, s, pose = i + 1, i, inverse(window.poses[i])
        synth, mask, z, pix = synthesize(
            window.images[s], depths[t], pose, window.intrinsics)
        fu = pix[..., 0] - np.floor(pix[..., 0])
        fv = pix[..., 1] - np.floor(pix[..., 1])
        far = (np.minimum(fu, 1.0 - fu) > cell_margin)
        far &= np.minimum(fv, 1.0 - fv) > cell_margin
        d_hat, _, _ = bilinear_sample(np.asarray(depths[s], dtype=float),
                                      pix[..., 0], pix[..., 1])
        far &= np.abs(d_hat - z) > gc_margin
        resid = np.abs(np.asarray(window.images[t], dtype=float) - synth)
        if resid.ndim == 3:
            resid = resid.min(axis=2)
        far &= resid > l1_margin
        masks.append(mask & far)
    return masks


def gradient_check(selector: str, window: SequenceWindow,
                   weights: LossWeights = LossWeights(),
                   twist_step: float = 1e-4, param_step: float = 1e-4,
                   rel_tol: float = 1e-3, abs_floor: float = 1e-7,
                   cell_margin: float = 0.05, gc_margin: float = 1e-2,
                   l1_margin: float = 1e-3, max_params_per_field: int = 0,
                   inject_error=None) -> GradCheckReport:
    """Central-difference audit of one loss's analytic gradients.

    ``selector`` is one of photometric, gc, smoothness, forward, backward
    or refine.  Every twist coordinate is checked; depth-field parameters
    are all checked unless ``max_params_per_field`` caps them.  Relative
    error uses ``|a - f| / max(|a|, |f|, abs_floor)``.  ``inject_error``
    is a testing hook ((block, flat_index, value) added to one analytic
    coordinate) proving the checker reports corrupted gradients.
    """
    depth_source = "learned" if window.fields is not None else "coarse"

    if selector == "smoothness":
        def fn(win):
            value = 0.0
            grads = []
            for i, fld in enumerate(win.fields):
                sm = smoothness_loss(fld.evaluate(), win.images[i], weights)
                value += sm.value
                grads.append(fld.backprop(sm.grad_depth))
            return _Plain(value, None, grads)
    elif selector in ("photometric", "gc"):
        eff = _CHECK_WEIGHTS[selector](weights)
        fwd = _branch_masks(window, "forward", eff, cell_margin, gc_margin,
                            l1_margin)

        def fn(win):
            return forward_window_loss(win, depth_source, eff, fixed_valid=fwd)
    elif selector in ("forward", "backward"):
        direction = selector
        masks = _branch_masks(window, direction, weights, cell_margin,
                              gc_margin, l1_margin)
        loss = forward_window_loss if direction == "forward" else backward_window_loss

        def fn(win):
            return loss(win, depth_source, weights, fixed_valid=masks)
    elif selector == "refine":
        fwd = _branch_masks(window, "forward", weights, cell_margin,
                            gc_margin, l1_margin)
        bwd = _branch_masks(window, "backward", weights, cell_margin,
                            gc_margin, l1_margin)

        def fn(win):
            return refine_loss(win, weights, fixed_valid=(fwd, bwd))
    else:
        raise ValueError(f"unknown gradient-check selector {selector!r}")

    base = fn(window)
    entries = []

    if base.grad_twists is not None and selector != "smoothness":
        for i in range(len(window.poses)):
            save = window.poses[i]
            for k in range(6):
                delta = np.zeros(6)
                delta[k] = twist_step
                window.poses[i] = compose(se3_exp(delta), save)
                lp = fn(window).value
                window.poses[i] = compose(se3_exp(-delta), save)
                lm = fn(window).value
                window.poses[i] = save
                fd = (lp - lm) / (2.0 * twist_step)
                entries.append((("twist", i), k, base.grad_twists[i][k], fd))

    if window.fields is not None and base.grad_depth_params is not None:
        for fi, fld in enumerate(window.fields):
            count = fld.params.size
            indices = range(count)
            if max_params_per_field and count > max_params_per_field:
                rng = np.random.default_rng(fi)
                indices = rng.choice(count, size=max_params_per_field,
                                     replace=False)
            for flat in indices:
                ij = np.unravel_index(int(flat), fld.params.shape)
                save = fld.params[ij]
                fld.params[ij] = save + param_step
                lp = fn(window).value
                fld.params[ij] = save - param_step
                lm = fn(window).value
                fld.params[ij] = save
                fd = (lp - lm) / (2.0 * param_step)
                entries.append(
                    (("field", fi), int(flat), base.grad_depth_params[fi][ij], fd))

    rels = []
    offenders = []
    for block, coord, analytic, fd in entries:
        if inject_error is not None and inject_error[0] == block \
                and inject_error[1] == coord:
            analytic = analytic + inject_error[2]
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), abs_floor)
        rels.append(rel)
        if rel >= rel_tol:
            offenders.append({
                "block": list(block), "coordinate": coord,
                "analytic": float(analytic), "fd": float(fd),
                "rel_error": float(rel),
            })
    return GradCheckReport(
        selector=selector,
        n_checked=len(entries),
        n_failed=len(offenders),
        max_rel_error=float(max(rels)) if rels else 0.0,
        median_rel_error=float(np.median(rels)) if rels else 0.0,
        offenders=offenders,
    )


@dataclass
class _Plain:
    value: float
    grad_twists: np.ndarray | None
    grad_depth_params: list | None


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, *, config_hash: str, stage: int, epoch: int,
                    twists: np.ndarray, fields=None, adam: Adam | None = None,
                    logs: dict | None = None, seed: int | None = None) -> None:
    """Versioned JSON checkpoint; floats round-trip bit-exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "stage": stage,
        "epoch": epoch,
        "seed": seed,
        "twists": np.asarray(twists).tolist(),
        "fields": None,
        "adam": adam.state_dict() if adam is not None else None,
        "logs": logs or {},
    }
    if fields is not None:
        doc["fields"] = [
            {
                "height": f.height, "width": f.width, "stride": f.stride,
                "disp_min": f.disp_min, "disp_max": f.disp_max,
                "params": f.params.tolist(),
            }
            for f in fields
        ]
    pathlib.Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> dict:
    doc = json.loads(pathlib.Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {doc.get('version')}")
    doc["twists"] = np.array(doc["twists"])
    if doc.get("fields"):
        doc["fields"] = [
            DepthField(f["height"], f["width"], stride=f["stride"],
                       disp_min=f["disp_min"], disp_max=f["disp_max"],
                       params=np.array(f["params"]))
            for f in doc["fields"]
        ]
    return doc
