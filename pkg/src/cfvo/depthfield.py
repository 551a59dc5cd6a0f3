"""Dense depth maps, sparse LiDAR depth images and the learnable depth field.

The depth field is a coarse grid of unconstrained disparity parameters,
bilinearly upsampled to image resolution and squashed through a sigmoid
into a bounded disparity band; depth is the reciprocal disparity.  It is
the compact differentiable stand-in for a full depth-prediction network:
one field per frame, optimized directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass
class SparseDepthImage:
    """Per-pixel depth grid (meters) with a validity mask."""

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.depth.shape != self.mask.shape:
            raise ValueError("depth and mask shapes differ")
        if bool((self.depth[self.mask] <= 0).any()):
            raise ValueError("valid pixels must carry positive depth")

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def check_depth_map(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    if not np.isfinite(depth).all() or (depth <= 0).any():
        raise ValueError("depth map values must be finite and positive")
    return depth


def bilinear_sample(grid: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear sample of a (H, W) or (H, W, C) grid at continuous (u, v).

    Coordinates on the image boundary (u == W-1 or v == H-1) are sampled
    exactly; anything outside [0, W-1] x [0, H-1] is flagged invalid and
    sampled at the clipped position (value present but masked).  The
    bounds carry a 1e-9 pixel guard so an identity warp stays all-valid
    despite round trips like (x*d)/d != x at the border.

    Returns (values, valid, ctx) where ctx carries the corner indices,
    weights and fractional offsets reused by gradient computations.
    """
    h, w = grid.shape[:2]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    tol = 1e-9
    valid = (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    i0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    fu = uc - j0
    fv = vc - i0
    w00 = (1.0 - fv) * (1.0 - fu)
    w01 = (1.0 - fv) * fu
    w10 = fv * (1.0 - fu)
    w11 = fv * fu
    g00 = grid[i0, j0]
    g01 = grid[i0, j0 + 1]
    g10 = grid[i0 + 1, j0]
    g11 = grid[i0 + 1, j0 + 1]
    if grid.ndim == 3:
        values = (
            w00[..., None] * g00
            + w01[..., None] * g01
            + w10[..., None] * g10
            + w11[..., None] * g11
        )
    else:
        values = w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11
    ctx = {
        "i0": i0,
        "j0": j0,
        "fu": fu,
        "fv": fv,
        "weights": (w00, w01, w10, w11),
        "corners": (g00, g01, g10, g11),
    }
    return values, valid, ctx


def bilinear_position_grad(ctx):
    """d(sample)/du and d(sample)/dv from a bilinear_sample context."""
    g00, g01, g10, g11 = ctx["corners"]
    fu, fv = ctx["fu"], ctx["fv"]
    if g00.ndim == fu.ndim + 1:  # channel axis present
        fu = fu[..., None]
        fv = fv[..., None]
    dval_du = (1.0 - fv) * (g01 - g00) + fv * (g11 - g10)
    dval_dv = (1.0 - fu) * (g10 - g00) + fu * (g11 - g01)
    return dval_du, dval_dv


def bilinear_scatter(shape, ctx, grad: np.ndarray) -> np.ndarray:
    """Adjoint of bilinear sampling: scatter-add grad into a (H, W) grid."""
    out = np.zeros(shape)
    i0, j0 = ctx["i0"], ctx["j0"]
    w00, w01, w10, w11 = ctx["weights"]
    np.add.at(out, (i0, j0), w00 * grad)
    np.add.at(out, (i0, j0 + 1), w01 * grad)
    np.add.at(out, (i0 + 1, j0), w10 * grad)
    np.add.at(out, (i0 + 1, j0 + 1), w11 * grad)
    return out


def interpolate_depth(depth_map: np.ndarray, u, v):
    """Bilinear depth lookup at continuous pixel coordinates.

    Returns (values, valid); out-of-bounds queries are masked invalid.
    """
    values, valid, _ = bilinear_sample(np.asarray(depth_map, dtype=float), u, v)
    return values, valid


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class DepthField:
    """Coarse learnable disparity grid evaluated to a dense positive depth map.

    Parameters live in an unconstrained domain; disparity is
    ``disp_min + (disp_max - disp_min) * sigmoid(upsampled parameter)``
    and depth its reciprocal, so the evaluated map is bounded inside
    ``[1/disp_max, 1/disp_min]`` for every parameter value.
    """

    def __init__(self, height, width, stride=8, disp_min=0.01, disp_max=10.0,
                 params=None):
        if height % stride or width % stride:
            raise ValueError("stride must divide the image dimensions")
        if not (0 < disp_min < disp_max):
            raise ValueError("need 0 < disp_min < disp_max")
        self.height = int(height)
        self.width = int(width)
        self.stride = int(stride)
        self.disp_min = float(disp_min)
        self.disp_max = float(disp_max)
        self.coarse_shape = (height // stride, width // stride)
        if params is None:
            self.params = np.zeros(self.coarse_shape)
        else:
            params = np.asarray(params, dtype=float)
            if params.shape != self.coarse_shape:
                raise ValueError(
                    f"params shape {params.shape} != {self.coarse_shape}"
                )
            self.params = params.copy()
        self._ctx = self._upsample_ctx()

    def _upsample_ctx(self):
        # coarse cell centers sit at pixel (i*stride + (stride-1)/2);
        # pixel coordinates map back into coarse space and clamp at edges
        # (border replicate), so the upsampling is a fixed linear map.
        ch, cw = self.coarse_shape
        s = self.stride
        off = (s - 1) / 2.0
        uu = (np.arange(self.width) - off) / s
        vv = (np.arange(self.height) - off) / s
        uc = np.clip(uu, 0.0, cw - 1.0)
        vc = np.clip(vv, 0.0, ch - 1.0)
        j0 = np.minimum(np.floor(uc).astype(np.intp), cw - 2) if cw > 1 else np.zeros(self.width, dtype=np.intp)
        i0 = np.minimum(np.floor(vc).astype(np.intp), ch - 2) if ch > 1 else np.zeros(self.height, dtype=np.intp)
        fu = uc - j0 if cw > 1 else np.zeros(self.width)
        fv = vc - i0 if ch > 1 else np.zeros(self.height)
        return {
            "i0": i0[:, None],
            "j0": j0[None, :],
            "fu": fu[None, :],
            "fv": fv[:, None],
        }

    def _upsample(self, coarse: np.ndarray) -> np.ndarray:
        c = self._ctx
        i0, j0, fu, fv = c["i0"], c["j0"], c["fu"], c["fv"]
        i1 = np.minimum(i0 + 1, self.coarse_shape[0] - 1)
        j1 = np.minimum(j0 + 1, self.coarse_shape[1] - 1)
        return (
            (1 - fv) * (1 - fu) * coarse[i0, j0]
            + (1 - fv) * fu * coarse[i0, j1]
            + fv * (1 - fu) * coarse[i1, j0]
            + fv * fu * coarse[i1, j1]
        )

    def _upsample_adjoint(self, grad: np.ndarray) -> np.ndarray:
        c = self._ctx
        i0 = np.broadcast_to(c["i0"], grad.shape)
        j0 = np.broadcast_to(c["j0"], grad.shape)
        fu = np.broadcast_to(c["fu"], grad.shape)
        fv = np.broadcast_to(c["fv"], grad.shape)
        i1 = np.minimum(i0 + 1, self.coarse_shape[0] - 1)
        j1 = np.minimum(j0 + 1, self.coarse_shape[1] - 1)
        out = np.zeros(self.coarse_shape)
        np.add.at(out, (i0, j0), (1 - fv) * (1 - fu) * grad)
        np.add.at(out, (i0, j1), (1 - fv) * fu * grad)
        np.add.at(out, (i1, j0), fv * (1 - fu) * grad)
        np.add.at(out, (i1, j1), fv * fu * grad)
        return out

    def _disparity(self):
        up = self._upsample(self.params)
        sig = _sigmoid(up)
        return self.disp_min + (self.disp_max - self.disp_min) * sig, sig

    def evaluate(self) -> np.ndarray:
        """Dense (H, W) depth map; deterministic given the parameters."""
        disp, _ = self._disparity()
        return 1.0 / disp

    def backprop(self, grad_depth: np.ndarray) -> np.ndarray:
        """Chain a dense d(loss)/d(depth) grid back to the coarse parameters.

        Exact chain rule through the reciprocal, the sigmoid bounding and
        the bilinear upsampling.
        """
        grad_depth = np.asarray(grad_depth, dtype=float)
        if grad_depth.shape != (self.height, self.width):
            raise ValueError("gradient grid dims must match the image")
        disp, sig = self._disparity()
        span = self.disp_max - self.disp_min
        grad_up = grad_depth * (-1.0 / (disp * disp)) * span * sig * (1.0 - sig)
        return self._upsample_adjoint(grad_up)

    def fit(self, target_depth: np.ndarray, ridge: float = 1e-9) -> "DepthField":
        """Least-squares fit of the coarse parameters to a target depth map.

        The target is inverted to disparity, clipped into the open band,
        mapped through the inverse sigmoid, and the coarse grid solved in
        the (linear) pre-sigmoid domain via slightly ridged normal
        equations.  Used to hand a recovered-scale depth over to the
        learnable representation without losing its scale.
        """
        target_depth = check_depth_map(target_depth)
        if target_depth.shape != (self.height, self.width):
            raise ValueError("target depth dims must match the field")
        span = self.disp_max - self.disp_min
        q = (1.0 / target_depth - self.disp_min) / span
        q = np.clip(q, 1e-9, 1.0 - 1e-9)
        y = np.log(q / (1.0 - q))

        c = self._ctx
        ch, cw = self.coarse_shape
        i0 = np.broadcast_to(c["i0"], y.shape).ravel()
        j0 = np.broadcast_to(c["j0"], y.shape).ravel()
        fu = np.broadcast_to(c["fu"], y.shape).ravel()
        fv = np.broadcast_to(c["fv"], y.shape).ravel()
        i1 = np.minimum(i0 + 1, ch - 1)
        j1 = np.minimum(j0 + 1, cw - 1)
        flat = [
            (i0 * cw + j0, (1 - fv) * (1 - fu)),
            (i0 * cw + j1, (1 - fv) * fu),
            (i1 * cw + j0, fv * (1 - fu)),
            (i1 * cw + j1, fv * fu),
        ]
        n = ch * cw
        ata = np.zeros((n, n))
        atb = np.zeros(n)
        yf = y.ravel()
        for idx_a, w_a in flat:
            np.add.at(atb, idx_a, w_a * yf)
            for idx_b, w_b in flat:
                np.add.at(ata, (idx_a, idx_b), w_a * w_b)
        ata[np.diag_indices(n)] += ridge * max(ata.trace() / n, 1.0)
        self.params = np.linalg.solve(ata, atb).reshape(self.coarse_shape)
        return self


def eval_depth(field: DepthField) -> np.ndarray:
    return field.evaluate()


def backprop_depth(field: DepthField, grad_wrt_depthmap: np.ndarray) -> np.ndarray:
    return field.backprop(grad_wrt_depthmap)


# -- serialization -----------------------------------------------------------
#
# Two on-disk depth formats:
#  * 16-bit big-endian binary PGM (P5, maxval 65535) storing depth*256,
#    i.e. depth = raw / 256 meters.
#  * raw 32-bit little-endian IEEE-754 with an 8-byte header of
#    (height, width) as 32-bit little-endian unsigned integers.

DEPTH_PGM_SCALE = 256.0


def write_depth_pgm(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=float)
    raw = np.rint(depth * DEPTH_PGM_SCALE)
    if (raw < 0).any() or (raw > 65535).any():
        raise ValueError("depth out of range for 16-bit PGM (max 255.996 m)")
    data = raw.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{depth.shape[1]} {depth.shape[0]}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_depth_pgm(path) -> np.ndarray:
    from .dataio import read_pgm_raw

    raw, maxval = read_pgm_raw(path)
    if maxval != 65535:
        raise ValueError(f"{path}: depth PGM must have maxval 65535, got {maxval}")
    return raw.astype(float) / DEPTH_PGM_SCALE


def write_depth_raw(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", depth.shape[0], depth.shape[1]))
        fh.write(depth.astype("<f4").tobytes())


def read_depth_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError(f"{path}: truncated raw-depth header")
        h, w = struct.unpack("<II", header)
        payload = fh.read()
    expected = h * w * 4
    if len(payload) != expected:
        raise ValueError(
            f"{path}: raw-depth payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(float)
