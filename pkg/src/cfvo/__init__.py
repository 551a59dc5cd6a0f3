"""Metric-scale monocular visual odometry and depth estimation.

The pipeline calibrates monocular depth predictions against sparse LiDAR
projections, recovers metric-scale relative poses by direct photometric
optimization over fixed scaled depths, then jointly refines poses and a
learnable per-frame depth field with forward and backward view-synthesis
losses.  ``ScaleRecoveryVO`` wraps the whole thing behind an
sklearn-style fit/predict interface; the submodules expose every stage
individually.
"""

from .depthfield import (
    DepthField,
    SparseDepthImage,
    backprop_depth,
    eval_depth,
    interpolate_depth,
)
from .estimator import FrameInputs, ScaleRecoveryVO
from .evaluation import (
    EvalReport,
    Trajectory,
    accumulate,
    ate_rmse,
    depth_metrics,
    kitti_segment_errors,
    trajectory_from_twists,
)
from .geometry import (
    CalibrationSet,
    CameraIntrinsics,
    Pose,
    apply,
    compose,
    inverse,
    project_lidar,
    se3_exp,
    se3_log,
    warp_pixel,
)
from .losses import (
    LossBundle,
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
from .scale import ScaleFactor, ScaleStats, apply_scale, estimate_scale, scale_statistics
from .synth import SceneFrame, SyntheticSceneSpec, generate, oracle_scene_spec
from .trainer import (
    Adam,
    SequenceData,
    TrainConfig,
    gradient_check,
    run_pipeline,
    run_single_stage_ablation,
    run_stage1,
    run_stage2,
    stage_switch,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CalibrationSet",
    "CameraIntrinsics",
    "DepthField",
    "EvalReport",
    "FrameInputs",
    "LossBundle",
    "LossWeights",
    "Pose",
    "ScaleFactor",
    "ScaleRecoveryVO",
    "ScaleStats",
    "SceneFrame",
    "SequenceData",
    "SequenceWindow",
    "SparseDepthImage",
    "SyntheticSceneSpec",
    "TrainConfig",
    "Trajectory",
    "accumulate",
    "apply",
    "apply_scale",
    "ate_rmse",
    "backprop_depth",
    "backward_window_loss",
    "compose",
    "depth_metrics",
    "estimate_scale",
    "eval_depth",
    "forward_window_loss",
    "gc_loss",
    "generate",
    "gradient_check",
    "interpolate_depth",
    "inverse",
    "kitti_segment_errors",
    "oracle_scene_spec",
    "photometric_loss",
    "project_lidar",
    "refine_loss",
    "run_pipeline",
    "run_single_stage_ablation",
    "run_stage1",
    "run_stage2",
    "scale_statistics",
    "se3_exp",
    "se3_log",
    "smoothness_loss",
    "ssim",
    "stage_switch",
    "synthesize",
    "trajectory_from_twists",
    "warp_pixel",
]
