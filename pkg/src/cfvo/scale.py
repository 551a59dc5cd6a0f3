"""Depth-scale calibration against sparse LiDAR projections.

Monocular depth predictions carry an unknown global factor.  Comparing a
robust statistic of the LiDAR-projected depths with the same statistic of
the prediction, restricted to the LiDAR-covered pixels, yields a per-frame
scale factor; multiplying the prediction by it lifts the frame to metric
scale.  Both statistics run over the identical valid-pixel set so the two
distributions are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depthfield import SparseDepthImage

DEFAULT_MIN_VALID = 50


class CalibrationError(ValueError):
    """Too few valid LiDAR pixels to calibrate a frame."""

    def __init__(self, n_valid: int, minimum: int):
        super().__init__(
            f"only {n_valid} valid LiDAR pixels, need at least {minimum}"
        )
        self.n_valid = n_valid
        self.minimum = minimum


@dataclass(frozen=True)
class ScaleFactor:
    """Dimensionless depth-scale factor and the pixel count behind it."""

    epsilon: float
    n_valid: int

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("scale factor must be positive")


@dataclass(frozen=True)
class ScaleStats:
    """Mean and sample standard deviation of per-frame scale ratios."""

    mu: float
    sigma: float


_ESTIMATORS = {"median": np.median, "mean": np.mean}


def estimate_scale(d_v: SparseDepthImage, d_pred: np.ndarray,
                   estimator: str = "median",
                   min_valid: int = DEFAULT_MIN_VALID) -> ScaleFactor:
    """Scale factor: statistic of LiDAR depths over statistic of predictions.

    Both statistics are taken over the LiDAR-valid pixel set.  The default
    estimator is the median; the mean is available for comparison.
    """
    if estimator not in _ESTIMATORS:
        raise ValueError(f"estimator must be one of {sorted(_ESTIMATORS)}")
    stat = _ESTIMATORS[estimator]
    mask = d_v.mask
    n_valid = int(mask.sum())
    if n_valid < min_valid:
        raise CalibrationError(n_valid, min_valid)
    d_pred = np.asarray(d_pred, dtype=float)
    if d_pred.shape != d_v.depth.shape:
        raise ValueError("prediction dims must match the sparse depth image")
    eps = float(stat(d_v.depth[mask]) / stat(d_pred[mask]))
    return ScaleFactor(epsilon=eps, n_valid=n_valid)


def apply_scale(scale, d_pred: np.ndarray) -> np.ndarray:
    """Pointwise scaling of a depth prediction to metric depth."""
    eps = scale.epsilon if isinstance(scale, ScaleFactor) else float(scale)
    return np.asarray(d_pred, dtype=float) * eps


def scale_statistics(ratios) -> ScaleStats:
    """Sample mean / sample standard deviation of per-frame scale ratios."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size < 2:
        raise ValueError("need at least 2 frames for scale statistics")
    return ScaleStats(mu=float(ratios.mean()), sigma=float(ratios.std(ddof=1)))
