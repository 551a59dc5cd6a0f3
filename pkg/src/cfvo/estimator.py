"""Scikit-learn-style estimator wrapping the full scale-recovery pipeline.

``ScaleRecoveryVO`` is the one-call API: ``fit`` takes a sequence of
frames (image + sparse LiDAR depth + pretrained depth prediction),
calibrates the depth scale, runs the two optimization stages, and leaves
the recovered trajectory and refined depth maps on fitted attributes.
``predict`` returns global poses and ``transform`` the refined metric
depth maps.  The class follows the sklearn estimator contract
(constructor stores parameters verbatim, ``get_params``/``set_params``,
trailing-underscore fitted attributes) so it clones and composes with
that ecosystem without depending on it.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass

import numpy as np

from .depthfield import SparseDepthImage
from .evaluation import Trajectory, trajectory_from_twists
from .geometry import CameraIntrinsics, project_lidar
from .losses import LossWeights
from .scale import apply_scale, estimate_scale
from .trainer import SequenceData, TrainConfig, run_stage1, run_stage2
from .validation import check_frames


@dataclass
class FrameInputs:
    """Minimal per-frame input record accepted by the estimator."""

    image: np.ndarray
    sparse: SparseDepthImage
    pretrained: np.ndarray


def frames_from_sequence(seq) -> list:
    """FrameInputs from a dataio.LoadedSequence (projects the LiDAR scans)."""
    intr = intrinsics_from_sequence(seq)
    frames = []
    for i in range(seq.n_frames):
        image = seq.image(i)
        sparse = project_lidar(seq.lidar(i), seq.calibration,
                               intr.width, intr.height)
        frames.append(FrameInputs(image=image, sparse=sparse,
                                  pretrained=seq.pretrained_depth(i)))
    return frames


def intrinsics_from_sequence(seq) -> CameraIntrinsics:
    """Rectified pinhole intrinsics from the P2 projection matrix."""
    probe = seq.image(0)
    p2 = seq.calibration.p_c2
    return CameraIntrinsics(fx=float(p2[0, 0]), fy=float(p2[1, 1]),
                            cx=float(p2[0, 2]), cy=float(p2[1, 2]),
                            width=probe.shape[1], height=probe.shape[0])


class NotFittedError(RuntimeError):
    pass


class ScaleRecoveryVO:
    """Metric-scale egomotion and depth from a monocular sequence.

    Parameters mirror the trainer configuration; see TrainConfig.  The
    defaults follow the full-scale recipe (learning rates 1e-4 / 1e-5);
    small desk-scale scenes optimize the pose chart directly and want
    much larger steps, e.g. ``stage1_lr=5e-3, stage2_lr=1e-3``.
    """

    def __init__(self, window_length=5, stage1_lr=1e-4, stage2_lr=1e-5,
                 stage1_epochs=40, min_stage1_epochs=10, total_epochs=60,
                 sequences_per_epoch=50, depth_stride=8, disp_min=0.01,
                 disp_max=10.0, scale_estimator="median", min_lidar_pixels=50,
                 loss_weights=None, seed=0):
        self.window_length = window_length
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.stage1_epochs = stage1_epochs
        self.min_stage1_epochs = min_stage1_epochs
        self.total_epochs = total_epochs
        self.sequences_per_epoch = sequences_per_epoch
        self.depth_stride = depth_stride
        self.disp_min = disp_min
        self.disp_max = disp_max
        self.scale_estimator = scale_estimator
        self.min_lidar_pixels = min_lidar_pixels
        self.loss_weights = loss_weights
        self.seed = seed

    # -- sklearn plumbing ------------------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for ScaleRecoveryVO")
            setattr(self, key, value)
        return self

    def __sklearn_is_fitted__(self):
        return hasattr(self, "trajectory_")

    def _check_fitted(self):
        if not self.__sklearn_is_fitted__():
            raise NotFittedError(
                "this ScaleRecoveryVO instance is not fitted yet")

    # -- pipeline ----------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        weights = self.loss_weights
        if weights is None:
            weights = LossWeights()
        elif isinstance(weights, dict):
            weights = LossWeights(**weights)
        return TrainConfig(
            window_length=self.window_length,
            stage1_lr=self.stage1_lr, stage2_lr=self.stage2_lr,
            stage1_epochs=self.stage1_epochs,
            min_stage1_epochs=self.min_stage1_epochs,
            total_epochs=self.total_epochs,
            sequences_per_epoch=self.sequences_per_epoch,
            depth_stride=self.depth_stride,
            disp_min=self.disp_min, disp_max=self.disp_max,
            seed=self.seed, weights=weights)

    def fit(self, X, y=None, intrinsics: CameraIntrinsics | None = None):
        """Calibrate scale and run both optimization stages on a sequence.

        ``X`` is either a list of frame records (attributes ``image``,
        ``sparse``, ``pretrained``) with ``intrinsics`` given explicitly,
        or a dataio.LoadedSequence carrying its own calibration.
        """
        if hasattr(X, "manifest"):
            intrinsics = intrinsics_from_sequence(X)
            X = frames_from_sequence(X)
        if intrinsics is None:
            raise ValueError("intrinsics are required with frame-list input")
        check_frames(X)

        scale_factors = []
        coarse = []
        for frame in X:
            sf = estimate_scale(frame.sparse, frame.pretrained,
                                estimator=self.scale_estimator,
                                min_valid=self.min_lidar_pixels)
            scale_factors.append(sf)
            coarse.append(apply_scale(sf, frame.pretrained))

        config = self._train_config()
        data = SequenceData(images=[np.asarray(f.image, dtype=float) for f in X],
                            intrinsics=intrinsics, coarse_depths=coarse)
        stage1 = run_stage1(data, config)
        stage2 = run_stage2(data, config, stage1)

        self.intrinsics_ = intrinsics
        self.scale_factors_ = scale_factors
        self.coarse_depths_ = coarse
        self.twists_ = stage2.twists
        self.fields_ = stage2.fields
        self.depth_maps_ = np.stack([f.evaluate() for f in stage2.fields])
        self.trajectory_ = trajectory_from_twists(stage2.twists)
        self.stage1_result_ = stage1
        self.stage2_result_ = stage2
        return self

    def predict(self, X=None) -> np.ndarray:
        """(n_frames, 4, 4) global camera-to-world pose matrices."""
        self._check_fitted()
        return np.stack([p.matrix() for p in self.trajectory_.poses])

    def transform(self, X=None) -> np.ndarray:
        """(n_frames, H, W) refined metric depth maps."""
        self._check_fitted()
        return self.depth_maps_.copy()

    def fit_predict(self, X, y=None, **kwargs) -> np.ndarray:
        return self.fit(X, y, **kwargs).predict()

    @property
    def trajectory(self) -> Trajectory:
        self._check_fitted()
        return self.trajectory_
