"""Pinhole camera model, SE(3) pose algebra and LiDAR-to-image projection.

Conventions used throughout the package:

- A twist is a length-6 vector ``(vx, vy, vz, wx, wy, wz)``: translational
  part first (meters), rotational part second (radians, axis-angle).
- A ``Pose`` maps points from one camera frame into another via
  ``p_out = R @ p_in + t``.
- Pixel coordinates are continuous ``(u, v)`` with ``u`` along image width.
- The camera model is a rectified pinhole without distortion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle, exp/log use their series expansions.
_SMALL_ANGLE = 1e-8


class PoseDomainError(ValueError):
    """Raised when se3_log is evaluated at (or too close to) angle pi."""


def skew(w: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Rectified pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def ray_grid(self) -> np.ndarray:
        """(H, W, 3) grid of unnormalized rays (x, y, 1) through each pixel."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        x = (u[None, :] - self.cx) / self.fx
        y = (v[:, None] - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = x
        rays[..., 1] = np.broadcast_to(y, (self.height, self.width))
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``p_out = rotation @ p_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())

    def orthonormality_defect(self) -> float:
        r = self.rotation
        return float(np.abs(r.T @ r - np.eye(3)).max())


def compose(a: Pose, b: Pose) -> Pose:
    """a after b: ``apply(compose(a, b), p) == apply(a, apply(b, p))``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def apply(a: Pose, p: np.ndarray) -> np.ndarray:
    """Transform a 3-vector or an (..., 3) array of points."""
    p = np.asarray(p, dtype=float)
    return p @ a.rotation.T + a.translation


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from an axis-angle 3-vector."""
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        # second-order series; exact to ~theta^3
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix; requires angle < pi - 1e-6."""
    trace = float(np.trace(R))
    cos_theta = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    theta = math.acos(cos_theta)
    if theta >= math.pi - 1e-6:
        raise PoseDomainError(f"rotation angle {theta:.9f} too close to pi")
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return vee  # sin(theta)/theta ~ 1
    return (theta / math.sin(theta)) * vee


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    """V matrix coupling rotation and translation in the SE(3) exp map."""
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    A = (1.0 - math.cos(theta)) / t2
    B = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + A * K + B * (K @ K)


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    coeff = (1.0 - cot) / (theta * theta)
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map from a twist ``(v, w)`` to a Pose."""
    twist = np.asarray(twist, dtype=float)
    v, w = twist[:3], twist[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp; raises PoseDomainError at rotation angle pi."""
    w = so3_log(pose.rotation)
    v = _left_jacobian_inv(w) @ pose.translation
    return np.concatenate([v, w])


def se3_adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint: ``exp(adjoint(T) @ xi) == T @ exp(xi) @ T^-1``.

    Twist ordering (v, w):  Ad = [[R, [t]x R], [0, R]].
    """
    ad = np.zeros((6, 6))
    ad[:3, :3] = pose.rotation
    ad[3:, 3:] = pose.rotation
    ad[:3, 3:] = skew(pose.translation) @ pose.rotation
    return ad


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians of a 3x3 rotation matrix."""
    cos_theta = min(1.0, max(-1.0, 0.5 * (float(np.trace(R)) - 1.0)))
    return math.acos(cos_theta)


def warp_pixel(p_t, depth, intrinsics: CameraIntrinsics, pose: Pose):
    """Back-project pixel(s) with depth, transform by ``pose``, reproject.

    Parameters
    ----------
    p_t : (2,) or (..., 2) array of (u, v) pixel coordinates
    depth : scalar or (...) array of positive depths in meters
    pose : transform from the target camera frame into the source frame

    Returns
    -------
    p_s : (..., 2) warped pixel coordinates
    z_s : (...) depth of the transformed point in the source frame.
        ``z_s <= 0`` marks a point behind the source camera; the caller
        treats such pixels as invalid rather than erroring.
    """
    p_t = np.asarray(p_t, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (p_t[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (p_t[..., 1] - intrinsics.cy) / intrinsics.fy
    pts = np.stack([x * depth, y * depth, np.broadcast_to(depth, x.shape)], axis=-1)
    pts_s = apply(pose, pts)
    z_s = pts_s[..., 2]
    safe_z = np.where(z_s != 0.0, z_s, 1.0)
    u_s = intrinsics.fx * pts_s[..., 0] / safe_z + intrinsics.cx
    v_s = intrinsics.fy * pts_s[..., 1] / safe_z + intrinsics.cy
    return np.stack([u_s, v_s], axis=-1), z_s


def _check_homogeneous(m: np.ndarray, name: str, tol: float = 1e-6) -> None:
    if m.shape != (4, 4):
        raise ValueError(f"{name} must be 4x4, got {m.shape}")
    if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
        raise ValueError(f"{name} bottom row must be (0, 0, 0, 1)")
    r = m[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise ValueError(f"{name} rotation block is not orthonormal within {tol}")


@dataclass(frozen=True)
class CalibrationSet:
    """KITTI-style camera/LiDAR calibration chain.

    ``p_c2`` is the 3x4 projection matrix of the rectified camera,
    ``t_rect_c0`` the 4x4 rectifying transform (a 3x3 rectification
    rotation padded with a unit homogeneous row), and ``t_c0_v`` the 4x4
    LiDAR-to-camera transform.
    """

    p_c2: np.ndarray
    t_rect_c0: np.ndarray
    t_c0_v: np.ndarray

    def __post_init__(self):
        if np.asarray(self.p_c2).shape != (3, 4):
            raise ValueError("p_c2 must be 3x4")
        _check_homogeneous(np.asarray(self.t_rect_c0), "t_rect_c0")
        _check_homogeneous(np.asarray(self.t_c0_v), "t_c0_v")

    def velo_to_image(self) -> np.ndarray:
        """Combined 3x4 matrix taking homogeneous LiDAR points to (su, sv, s)."""
        return self.p_c2 @ self.t_rect_c0 @ self.t_c0_v


def parse_calibration(text: str) -> CalibrationSet:
    """Parse KITTI-style key-value calibration text.

    Recognized lines (others are ignored):

    - ``P2:`` 12 numbers, row-major 3x4 projection matrix.
    - ``R0_rect:`` or ``R_rect:`` 9 numbers, row-major 3x3 rectification
      rotation, padded here to 4x4 with a unit homogeneous row.
    - ``Tr_velo_to_cam:`` or ``Tr:`` 12 numbers, row-major 3x4 transform,
      padded to 4x4 the same way.

    Numbers are parsed with Python ``float`` and serialized with ``repr``,
    so a parse -> format -> parse round trip is bit-exact.
    """
    entries = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        values = [float(tok) for tok in rest.split()]
        entries[key.strip()] = values

    def grab(names, count):
        for name in names:
            if name in entries:
                vals = entries[name]
                if len(vals) != count:
                    raise ValueError(
                        f"calibration key {name} has {len(vals)} values, expected {count}"
                    )
                return np.array(vals)
        raise ValueError(f"calibration text missing any of {names}")

    p2 = grab(["P2"], 12).reshape(3, 4)
    r_rect = grab(["R0_rect", "R_rect"], 9).reshape(3, 3)
    tr = grab(["Tr_velo_to_cam", "Tr"], 12).reshape(3, 4)

    t_rect = np.eye(4)
    t_rect[:3, :3] = r_rect
    t_velo = np.eye(4)
    t_velo[:3, :] = tr
    return CalibrationSet(p_c2=p2, t_rect_c0=t_rect, t_c0_v=t_velo)


def format_calibration(calib: CalibrationSet) -> str:
    def row(key, values):
        return key + ": " + " ".join(repr(float(v)) for v in values)

    return "\n".join(
        [
            row("P2", calib.p_c2.ravel()),
            row("R0_rect", calib.t_rect_c0[:3, :3].ravel()),
            row("Tr_velo_to_cam", calib.t_c0_v[:3, :].ravel()),
        ]
    ) + "\n"


def project_lidar(points: np.ndarray, calib: CalibrationSet, width: int, height: int):
    """Project LiDAR points through the calibration chain into a sparse depth image.

    Points with non-positive projected depth or landing outside the image
    are discarded.  Sub-pixel hits snap to the nearest integer pixel
    (ties-to-even).  When several points land in the same pixel the
    smallest depth wins (z-buffer: the nearest surface is the visible one).

    Returns a ``SparseDepthImage``; an empty surviving set yields a mask
    with zero valid pixels.
    """
    from .depthfield import SparseDepthImage

    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] not in (3, 4):
        raise ValueError("points must be (N, 3) or (N, 4)")
    if not np.isfinite(points).all():
        raise ValueError("point cloud contains non-finite coordinates")
    xyz1 = np.ones((points.shape[0], 4))
    xyz1[:, :3] = points[:, :3]

    proj = xyz1 @ calib.velo_to_image().T  # (N, 3) = (su, sv, s)
    z = proj[:, 2]
    keep = z > 0
    u = np.rint(proj[keep, 0] / z[keep]).astype(int)
    v = np.rint(proj[keep, 1] / z[keep]).astype(int)
    z = z[keep]
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z = u[inside], v[inside], z[inside]

    depth = np.full((height, width), np.inf)
    np.minimum.at(depth, (v, u), z)
    mask = np.isfinite(depth)
    depth = np.where(mask, depth, 0.0)
    return SparseDepthImage(depth=depth, mask=mask)
