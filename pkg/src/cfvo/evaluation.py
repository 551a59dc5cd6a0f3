"""Odometry and depth evaluation with KITTI-style conventions.

Segment errors follow the odometry devkit recipe: for every start frame
and every segment length from 100 m to 800 m measured along the
ground-truth arc length, compare the relative transform of the estimate
against the ground truth's and average translation (percent) and
rotation (degrees per 100 m) over all segments jointly.  ATE is the RMSE
of per-frame position residual norms, optionally after a single global
scale aligning the estimate to the ground truth.
"""

from __future__ import annotations

import json
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .depthfield import SparseDepthImage
from .geometry import Pose, compose, inverse, rotation_angle, se3_exp
from .scale import ScaleStats

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class Trajectory:
    """Global camera-to-world poses, one per frame."""

    poses: list
    frame_ids: list | None = None

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if self.frame_ids is None:
            self.frame_ids = list(range(len(self.poses)))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def accumulate(relative_poses) -> Trajectory:
    """Left-fold relative camera motions from the identity.

    ``relative_poses[i]`` maps frame i+1 coordinates into frame i (the
    camera's motion step), so global_{i+1} = global_i o rel_i.
    """
    poses = [Pose.identity()]
    for rel in relative_poses:
        poses.append(compose(poses[-1], rel))
    return Trajectory(poses=poses)


def trajectory_from_twists(twists) -> Trajectory:
    """Trajectory from per-pair warp twists (target i into source i+1).

    The warp pose is the inverse of the camera motion, hence the inversion.
    """
    return accumulate([inverse(se3_exp(t)) for t in np.asarray(twists)])


def _arc_lengths(traj: Trajectory) -> np.ndarray:
    pos = traj.positions()
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _first_frame_reaching(dist, start, length):
    target = dist[start] + length
    idx = int(np.searchsorted(dist, target))
    return idx if idx < len(dist) else None


def kitti_segment_errors(est: Trajectory, gt: Trajectory,
                         lengths=SEGMENT_LENGTHS, step: int = 1):
    """Segment-averaged translation (%) and rotation (deg/100m) errors.

    The relative-pose error of a segment (i, j) is
    E = (gt_i^-1 gt_j)^-1 (est_i^-1 est_j); its translation norm divided
    by the segment length contributes to t_rel and its rotation angle per
    length to r_rel.  Segments start at every ``step``-th frame and end
    at the first frame whose ground-truth arc length reaches the segment
    length.  Raises ValueError when the path is shorter than the smallest
    segment.
    """
    if len(est) != len(gt):
        raise ValueError("trajectories must have equal length")
    dist = _arc_lengths(gt)
    if dist[-1] < min(lengths):
        raise ValueError(
            f"ground-truth path is {dist[-1]:.1f} m, shorter than the "
            f"smallest segment ({min(lengths):.0f} m)")
    t_errs = []
    r_errs = []
    for start in range(0, len(gt), step):
        for length in lengths:
            end = _first_frame_reaching(dist, start, length)
            if end is None:
                break
            rel_gt = compose(inverse(gt.poses[start]), gt.poses[end])
            rel_est = compose(inverse(est.poses[start]), est.poses[end])
            err = compose(inverse(rel_gt), rel_est)
            t_errs.append(float(np.linalg.norm(err.translation)) / length)
            r_errs.append(rotation_angle(err.rotation) / length)
    if not t_errs:
        raise ValueError("no evaluable segments")
    t_rel = 100.0 * float(np.mean(t_errs))
    r_rel = 100.0 * math.degrees(float(np.mean(r_errs)))
    return t_rel, r_rel


def ate_rmse(est: Trajectory, gt: Trajectory, alignment: str = "none") -> float:
    """Root-mean-square of per-frame position residual norms (meters).

    ``alignment="scale_only"`` first applies the single global scale
    minimizing the squared residuals (the closed form
    s = sum(<x, x_gt>) / sum(|x|^2)).
    """
    if len(est) != len(gt):
        raise ValueError("trajectories must have equal length")
    x = est.positions()
    g = gt.positions()
    if alignment == "scale_only":
        denom = float((x * x).sum())
        s = float((x * g).sum()) / denom if denom > 0 else 1.0
        x = s * x
    elif alignment != "none":
        raise ValueError("alignment must be 'none' or 'scale_only'")
    resid = np.linalg.norm(x - g, axis=1)
    return float(np.sqrt((resid ** 2).mean()))


DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


def depth_metrics(depth: np.ndarray, d_v: SparseDepthImage,
                  cap: float = 80.0) -> dict:
    """Standard depth error/accuracy metrics over the valid pixel set.

    Valid pixels are those with a ground-truth sample at depth <= cap.
    Returns abs_rel, sq_rel, rmse and the three ratio-threshold
    accuracies delta_1..delta_3 (thresholds 1.25, 1.25^2, 1.25^3).
    """
    depth = np.asarray(depth, dtype=float)
    mask = d_v.mask & (d_v.depth <= cap) & (d_v.depth > 0)
    if not mask.any():
        raise ValueError("no valid ground-truth depth pixels under the cap")
    pred = depth[mask]
    gt = d_v.depth[mask]
    err = pred - gt
    ratio = np.maximum(gt / pred, pred / gt)
    out = {
        "abs_rel": float(np.mean(np.abs(err) / gt)),
        "sq_rel": float(np.mean(err * err / gt)),
        "rmse": float(np.sqrt(np.mean(err * err))),
    }
    for i, th in enumerate(DELTA_THRESHOLDS, start=1):
        out[f"delta_{i}"] = float(np.mean(ratio < th))
    return out


@dataclass
class EvalReport:
    """Everything the evaluator measures, in the usual table layout."""

    t_rel: float | None = None
    r_rel: float | None = None
    ate_rmse: float | None = None
    depth: dict | None = None
    scale_stats: ScaleStats | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "pose": {
                "t_rel_percent": self.t_rel,
                "r_rel_deg_per_100m": self.r_rel,
                "ate_rmse_m": self.ate_rmse,
            },
            "depth": None,
            "scale": None,
            "config": self.config,
        }
        if self.depth is not None:
            doc["depth"] = {
                "abs_rel": self.depth["abs_rel"],
                "sq_rel": self.depth["sq_rel"],
                "rmse": self.depth["rmse"],
                "delta_1.25": self.depth["delta_1"],
                "delta_1.25^2": self.depth["delta_2"],
                "delta_1.25^3": self.depth["delta_3"],
            }
        if self.scale_stats is not None:
            doc["scale"] = {"mu": self.scale_stats.mu,
                            "sigma": self.scale_stats.sigma}
        return doc


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """(w, x, y, z) unit quaternion of a rotation matrix."""
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        return np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                         (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    i = int(np.argmax(np.diag(r)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
    q = np.empty(4)
    q[0] = (r[k, j] - r[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (r[j, i] + r[i, j]) / s
    q[1 + k] = (r[k, i] + r[i, k]) / s
    return q


def write_trajectory_csv(path, traj: Trajectory) -> None:
    lines = ["frame,x,y,z,qw,qx,qy,qz"]
    for fid, pose in zip(traj.frame_ids, traj.poses):
        q = rotation_to_quaternion(pose.rotation)
        t = pose.translation
        lines.append(
            f"{fid}," + ",".join(repr(float(v)) for v in (*t, *q)))
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def write_trajectory_svg(path, est: Trajectory, gt: Trajectory | None = None,
                         size: int = 560) -> None:
    """Top-down (x, z) trajectory plot as a standalone SVG."""
    tracks = [("estimate", "#1f77b4", est)]
    if gt is not None:
        tracks.insert(0, ("ground truth", "#999999", gt))
    pts = np.vstack([t.positions()[:, [0, 2]] for _, _, t in tracks])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = 0.06 * span.max()
    lo, hi = lo - pad, hi + pad
    span = hi - lo
    scale = (size - 80) / span.max()

    def to_px(p):
        x = 40 + (p[0] - lo[0]) * scale
        y = size - 40 - (p[1] - lo[1]) * scale
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]
    for li, (label, color, track) in enumerate(tracks):
        coords = " ".join(
            "{:.3f},{:.3f}".format(*to_px(p))
            for p in track.positions()[:, [0, 2]])
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>')
        parts.append(
            f'<text x="46" y="{22 + 16 * li}" font-size="12" '
            f'fill="{color}">{label}</text>')
    parts.append(
        f'<text x="{size - 130}" y="{size - 12}" font-size="11" '
        f'fill="#333">x / z top-down, meters</text>')
    parts.append("</svg>")
    pathlib.Path(path).write_text("\n".join(parts) + "\n")


def emit_report(report: EvalReport, out_dir, est: Trajectory,
                gt: Trajectory | None = None) -> dict:
    """Write report.json, trajectory.csv and trajectory.svg; returns paths."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = out / "trajectory.csv"
    write_trajectory_csv(csv_path, est)
    svg_path = out / "trajectory.svg"
    write_trajectory_svg(svg_path, est, gt)
    return {"report": str(report_path), "csv": str(csv_path),
            "svg": str(svg_path)}
