"""Synthetic-scene oracle: sequences with exact poses, depths and LiDAR.

Frames are rendered by ray-casting a textured, gently undulating surface
from each ground-truth camera pose.  Every frame is an independent
ground-truth view (no warping of a base frame), so photometric
consistency between frames is exact up to bilinear interpolation of the
discrete images.  The sparse "LiDAR" samples are exact surface depths at
a random pixel subset, and the surrogate "pretrained" depth prediction is
the true depth divided by a configurable scale factor with optional
multiplicative noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import dataio
from .depthfield import SparseDepthImage, write_depth_pgm, write_depth_raw
from .geometry import (
    CalibrationSet,
    CameraIntrinsics,
    Pose,
    compose,
    format_calibration,
    se3_exp,
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Scene, trajectory and noise description for the renderer.

    The surface is a frontal wall at ``base_depth`` plus a sum of
    low-frequency sinusoidal height perturbations; the texture is a sum
    of band-limited sinusoids painted over the wall.  Periods are in
    meters.  ``pretrained_scale`` is the factor by which the surrogate
    pretrained depth is too small: prediction = truth / scale * (1+eta),
    eta ~ N(0, pretrained_noise).
    """

    width: int = 192
    height: int = 64
    fx: float = 96.0
    fy: float = 96.0
    cx: float = 95.5
    cy: float = 31.5
    frames: int = 20
    base_depth: float = 6.0
    surface_waves: int = 3
    surface_amplitude: float = 0.24
    surface_min_period: float = 4.0
    texture_waves: int = 6
    texture_amplitude: float = 0.36
    texture_min_period: float = 2.8
    step_translation: tuple = (0.05, 0.012, 0.08)
    translation_jitter: float = 0.3
    rotation_jitter: float = 0.004
    image_noise: float = 0.0
    lidar_dropout: float = 0.92
    pretrained_scale: float = 1.0
    pretrained_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.base_depth - self.surface_amplitude <= 0.5:
            raise ValueError("surface may come closer than 0.5 m to the camera")
        if self.rotation_jitter * math.sqrt(3.0) >= 0.1:
            raise ValueError("per-frame rotation must stay below 0.1 rad")
        if not (0.0 <= self.lidar_dropout < 1.0):
            raise ValueError("lidar_dropout must be in [0, 1)")
        if self.pretrained_scale <= 0:
            raise ValueError("pretrained_scale must be positive")
        if not (0 < self.texture_amplitude <= 0.45):
            raise ValueError("texture_amplitude must be in (0, 0.45]")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy,
                                self.width, self.height)


def oracle_scene_spec(**overrides) -> SyntheticSceneSpec:
    """A very smooth scene where interpolation error is negligible.

    Used by oracle-minimality checks: texture and surface periods are so
    long relative to the pixel pitch that bilinear resampling error stays
    well below 1e-5 in the losses.
    """
    base = dict(
        surface_waves=2,
        surface_amplitude=0.12,
        surface_min_period=10.0,
        texture_waves=3,
        texture_amplitude=0.30,
        texture_min_period=10.0,
        step_translation=(0.03, 0.008, 0.04),
        rotation_jitter=0.002,
    )
    base.update(overrides)
    return SyntheticSceneSpec(**base)


@dataclass
class SceneFrame:
    """One rendered frame with its full ground truth."""

    image: np.ndarray
    depth: np.ndarray
    pose: Pose                      # camera-to-world
    sparse: SparseDepthImage        # LiDAR surrogate
    pretrained: np.ndarray          # surrogate pretrained depth prediction


class _Waves:
    """Sum of planar sinusoids over world (x, y)."""

    def __init__(self, rng, n, total_amplitude, min_period):
        self.amp = np.full(n, total_amplitude / n)
        periods = min_period * (1.0 + rng.random(n))
        angles = rng.random(n) * 2.0 * math.pi
        self.kx = np.cos(angles) / periods
        self.ky = np.sin(angles) / periods
        self.phase = rng.random(n) * 2.0 * math.pi

    def value(self, x, y):
        out = np.zeros_like(x)
        for a, kx, ky, ph in zip(self.amp, self.kx, self.ky, self.phase):
            out += a * np.sin(2.0 * math.pi * (kx * x + ky * y) + ph)
        return out

    def gradient(self, x, y):
        gx = np.zeros_like(x)
        gy = np.zeros_like(y)
        for a, kx, ky, ph in zip(self.amp, self.kx, self.ky, self.phase):
            c = a * 2.0 * math.pi * np.cos(2.0 * math.pi * (kx * x + ky * y) + ph)
            gx += c * kx
            gy += c * ky
        return gx, gy


def _trajectory(spec: SyntheticSceneSpec, rng) -> list:
    """Ground-truth camera-to-world poses, one per frame."""
    poses = [Pose.identity()]
    step = np.asarray(spec.step_translation, dtype=float)
    for _ in range(spec.frames - 1):
        jitter = 1.0 + spec.translation_jitter * (2.0 * rng.random(3) - 1.0)
        v = step * jitter
        w = spec.rotation_jitter * (2.0 * rng.random(3) - 1.0)
        motion = se3_exp(np.concatenate([v, w]))  # frame k+1 -> frame k
        poses.append(compose(poses[-1], motion))
    return poses


def _render(spec: SyntheticSceneSpec, surface: _Waves, texture: _Waves,
            pose: Pose, rays: np.ndarray):
    """Ray-cast one frame: returns (image, depth)."""
    origin = pose.translation
    dirs = rays @ pose.rotation.T
    dz = dirs[..., 2]
    if (dz <= 0.1).any():
        raise ValueError("camera ray leaves the surface half-space")
    t = (spec.base_depth - origin[2]) / dz
    for _ in range(30):
        x = origin[0] + t * dirs[..., 0]
        y = origin[1] + t * dirs[..., 1]
        z = origin[2] + t * dz
        h = surface.value(x, y)
        resid = z - spec.base_depth - h
        if np.abs(resid).max() < 1e-12:
            break
        hx, hy = surface.gradient(x, y)
        slope = dz - hx * dirs[..., 0] - hy * dirs[..., 1]
        t = t - resid / slope
    x = origin[0] + t * dirs[..., 0]
    y = origin[1] + t * dirs[..., 1]
    image = 0.5 + texture.value(x, y)
    return image, t.copy()


def generate(spec: SyntheticSceneSpec) -> list:
    """Render the full sequence of SceneFrames for a scene spec."""
    rng = np.random.default_rng(spec.seed)
    surface = _Waves(rng, spec.surface_waves, spec.surface_amplitude,
                     spec.surface_min_period)
    texture = _Waves(rng, spec.texture_waves, spec.texture_amplitude,
                     spec.texture_min_period)
    poses = _trajectory(spec, rng)
    intr = spec.intrinsics()
    rays = intr.ray_grid()

    frames = []
    for pose in poses:
        image, depth = _render(spec, surface, texture, pose, rays)
        if depth.min() <= 0.5:
            raise ValueError("rendered depth came closer than 0.5 m")
        if spec.image_noise > 0:
            image = np.clip(
                image + rng.normal(0.0, spec.image_noise, image.shape), 0.0, 1.0)
        keep = rng.random(depth.shape) >= spec.lidar_dropout
        sparse = SparseDepthImage(depth=np.where(keep, depth, 0.0), mask=keep)
        factor = np.ones_like(depth)
        if spec.pretrained_noise > 0:
            factor = np.maximum(
                1.0 + rng.normal(0.0, spec.pretrained_noise, depth.shape), 0.05)
        pretrained = depth / spec.pretrained_scale * factor
        frames.append(SceneFrame(image=image, depth=depth, pose=pose,
                                 sparse=sparse, pretrained=pretrained))
    return frames


def make_default_calibration(intr: CameraIntrinsics) -> CalibrationSet:
    """A KITTI-flavored calibration chain for synthetic data.

    LiDAR axes follow the usual convention (x forward, y left, z up) so
    the velo-to-camera rotation is a real axis permutation, with a small
    lever arm; rectification is the identity and P2 projects the
    rectified camera directly.
    """
    p2 = np.zeros((3, 4))
    p2[:3, :3] = intr.matrix()
    t_rect = np.eye(4)
    t_velo = np.eye(4)
    t_velo[:3, :3] = np.array([[0.0, -1.0, 0.0],
                               [0.0, 0.0, -1.0],
                               [1.0, 0.0, 0.0]])
    t_velo[:3, 3] = (-0.06, -0.05, 0.27)
    return CalibrationSet(p_c2=p2, t_rect_c0=t_rect, t_c0_v=t_velo)


def lidar_cloud_from_sparse(sparse: SparseDepthImage, intr: CameraIntrinsics,
                            calib: CalibrationSet, reflectance: float = 0.5):
    """Back-project a sparse depth image into LiDAR-frame points.

    Inverse of geometry.project_lidar for the synthetic calibration, so a
    written scan re-projects onto exactly the pixels it came from.
    """
    vs, us = np.nonzero(sparse.mask)
    depth = sparse.depth[vs, us]
    x = (us - intr.cx) / intr.fx * depth
    y = (vs - intr.cy) / intr.fy * depth
    cam = np.stack([x, y, depth, np.ones_like(depth)], axis=1)
    chain = calib.t_rect_c0 @ calib.t_c0_v
    velo = cam @ np.linalg.inv(chain).T
    points = np.empty((velo.shape[0], 4))
    points[:, :3] = velo[:, :3]
    points[:, 3] = reflectance
    return points


def write_dataset(frames, spec: SyntheticSceneSpec, out_dir,
                  metadata: dict | None = None) -> None:
    """Write frames as a dataset directory in the layout dataio reads.

    Layout: ``image_2/NNNNNN.pgm`` (16-bit), ``velodyne/NNNNNN.bin``,
    ``depth_pred/NNNNNN.f32``, ``calib.txt``, ``times.txt``, ``poses.txt``
    and a ``meta.json`` echoing the scene spec.
    """
    import pathlib

    out = pathlib.Path(out_dir)
    (out / "image_2").mkdir(parents=True, exist_ok=True)
    (out / "velodyne").mkdir(exist_ok=True)
    (out / "depth_pred").mkdir(exist_ok=True)
    (out / "depth_gt").mkdir(exist_ok=True)

    intr = spec.intrinsics()
    calib = make_default_calibration(intr)
    (out / "calib.txt").write_text(format_calibration(calib))

    pose_lines = []
    time_lines = []
    for k, frame in enumerate(frames):
        stem = f"{k:06d}"
        dataio.write_pgm(out / "image_2" / f"{stem}.pgm", frame.image)
        points = lidar_cloud_from_sparse(frame.sparse, intr, calib)
        dataio.write_lidar_bin(out / "velodyne" / f"{stem}.bin", points)
        write_depth_raw(out / "depth_pred" / f"{stem}.f32", frame.pretrained)
        # sparse GT depth as 16-bit PGM, raw 0 marking invalid pixels
        write_depth_pgm(out / "depth_gt" / f"{stem}.pgm",
                        np.where(frame.sparse.mask, frame.sparse.depth, 0.0))
        m = frame.pose.matrix()
        pose_lines.append(" ".join(repr(float(v)) for v in m[:3].ravel()))
        time_lines.append(repr(0.1 * k))
    (out / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    (out / "times.txt").write_text("\n".join(time_lines) + "\n")

    meta = {"scene_spec": asdict(spec)}
    if metadata:
        meta.update(metadata)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
