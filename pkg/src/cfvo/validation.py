"""Input validation helpers for the public entry points."""

from __future__ import annotations

import numpy as np

from .depthfield import SparseDepthImage


def check_image(image, name: str = "image") -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] not in (1, 3)):
        raise ValueError(f"{name} must be (H, W) or (H, W, 1|3)")
    if not np.isfinite(image).all():
        raise ValueError(f"{name} contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return image


def check_positive_depth(depth, name: str = "depth") -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if not np.isfinite(depth).all() or (depth <= 0).any():
        raise ValueError(f"{name} must be finite and positive everywhere")
    return depth


def check_frames(frames):
    """Validate a sequence of frame inputs (image/sparse/pretrained attrs).

    All frames must share the image shape; sparse depth grids and
    pretrained predictions must match it.
    """
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    shape = None
    for i, frame in enumerate(frames):
        for attr in ("image", "sparse", "pretrained"):
            if not hasattr(frame, attr):
                raise ValueError(f"frame {i} lacks the {attr!r} attribute")
        img = check_image(frame.image, f"frame {i} image")
        hw = img.shape[:2]
        if shape is None:
            shape = hw
        elif hw != shape:
            raise ValueError(f"frame {i} image shape {hw} != {shape}")
        if not isinstance(frame.sparse, SparseDepthImage):
            raise ValueError(f"frame {i} sparse depth must be a SparseDepthImage")
        if frame.sparse.depth.shape != shape:
            raise ValueError(f"frame {i} sparse depth shape mismatch")
        pred = check_positive_depth(frame.pretrained, f"frame {i} pretrained depth")
        if pred.shape != shape:
            raise ValueError(f"frame {i} pretrained depth shape mismatch")
    return shape
