"""Dataset ingestion: KITTI-style sequences and externally produced depths.

File formats (all little-endian unless stated otherwise):

- Images: binary PGM (P5) and PPM (P6), 8- or 16-bit (16-bit is
  big-endian per the netpbm convention); decoded to floats in [0, 1] by
  dividing by maxval, so a read -> write round trip is bit-identical.
  PNG is read-only and optional (engages when Pillow is importable).
- LiDAR scans: consecutive records of four 32-bit little-endian IEEE-754
  floats (x, y, z, reflectance), meters.
- Calibration: key-value text parsed by geometry.parse_calibration.
- Ground-truth poses: 12 numbers per line, row-major 3x4 camera-to-world
  transform (KITTI odometry devkit format).
- Timestamps: one decimal seconds value per line.
- Depth predictions: the depthfield serialization formats (16-bit PGM at
  depth = raw/256, or raw float32 with an 8-byte height/width header).
"""

from __future__ import annotations

import pathlib
from dataclasses import dataclass, field

import numpy as np

from .depthfield import read_depth_pgm, read_depth_raw
from .geometry import CalibrationSet, Pose, parse_calibration

LIDAR_RECORD_BYTES = 16


class LoadError(ValueError):
    """A structured ingestion failure naming the offending path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


# -- netpbm images ------------------------------------------------------------

def _read_pnm_header(fh, path):
    # header tokens may be separated by arbitrary whitespace and comments
    tokens = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise LoadError(path, "truncated netpbm header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    magic = tokens[0].decode("ascii")
    width, height, maxval = (int(t) for t in tokens[1:4])
    return magic, width, height, maxval


def read_pgm_raw(path):
    """Raw integer samples of a binary PGM plus its maxval."""
    path = pathlib.Path(path)
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_pnm_header(fh, path)
        if magic != "P5":
            raise LoadError(path, f"expected binary PGM (P5), got {magic}")
        dtype = ">u2" if maxval > 255 else "u1"
        count = width * height
        data = fh.read()
    expected = count * (2 if maxval > 255 else 1)
    if len(data) != expected:
        raise LoadError(path, f"payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype).reshape(height, width), maxval


def read_image(path) -> np.ndarray:
    """Decode a PGM/PPM (or optionally PNG) image to floats in [0, 1].

    PNG decoding is a feature switch: it engages only when Pillow is
    importable, keeping the mandatory formats dependency-free.
    """
    path = pathlib.Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_pnm_header(fh, path)
        if magic not in ("P5", "P6"):
            raise LoadError(path, f"unsupported netpbm magic {magic}")
        channels = 1 if magic == "P5" else 3
        dtype = ">u2" if maxval > 255 else "u1"
        itemsize = 2 if maxval > 255 else 1
        count = width * height * channels
        data = fh.read()
    if len(data) != count * itemsize:
        raise LoadError(
            path, f"payload is {len(data)} bytes, expected {count * itemsize}")
    raw = np.frombuffer(data, dtype=dtype).astype(float) / maxval
    if channels == 1:
        return raw.reshape(height, width)
    return raw.reshape(height, width, 3)


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image as PILImage
    except ImportError as exc:
        raise LoadError(
            path, "PNG support needs the optional Pillow dependency") from exc
    with PILImage.open(path) as img:
        mode = img.mode
        arr = np.asarray(img)
    if mode in ("I;16", "I;16B", "I"):
        maxval = 65535.0
    elif mode in ("L", "RGB"):
        maxval = 255.0
    else:
        raise LoadError(path, f"unsupported PNG mode {mode}")
    out = arr.astype(float) / maxval
    if out.ndim == 3 and out.shape[2] == 4:
        out = out[..., :3]
    return out


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    """Write a [0, 1] grayscale image as a binary PGM."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("write_pgm expects a single-channel image")
    raw = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(raw.astype(dtype).tobytes())


def write_ppm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a [0, 1] RGB image as a binary PPM."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_ppm expects an (H, W, 3) image")
    raw = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(raw.astype(dtype).tobytes())


# -- LiDAR scans --------------------------------------------------------------

def read_lidar_bin(path) -> np.ndarray:
    """(N, 4) float array of x, y, z, reflectance records."""
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(path, str(exc)) from exc
    if len(data) % LIDAR_RECORD_BYTES:
        raise LoadError(
            path,
            f"size {len(data)} is not a multiple of the "
            f"{LIDAR_RECORD_BYTES}-byte record")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(float)


def write_lidar_bin(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 4:
        raise ValueError("points must be (N, 4)")
    with open(path, "wb") as fh:
        fh.write(points.astype("<f4").tobytes())


# -- poses and timestamps ------------------------------------------------------

def read_poses(path) -> list:
    """Ground-truth camera-to-world poses, one 3x4 row-major line each."""
    path = pathlib.Path(path)
    poses = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = [float(tok) for tok in line.split()]
        if len(vals) != 12:
            raise LoadError(path, f"line {ln} has {len(vals)} values, expected 12")
        m = np.eye(4)
        m[:3, :] = np.array(vals).reshape(3, 4)
        poses.append(Pose.from_matrix(m))
    if not poses:
        raise LoadError(path, "no poses")
    return poses


def write_poses(path, poses) -> None:
    lines = []
    for pose in poses:
        lines.append(" ".join(repr(float(v)) for v in pose.matrix()[:3].ravel()))
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def read_timestamps(path) -> np.ndarray:
    path = pathlib.Path(path)
    stamps = [float(tok) for tok in path.read_text().split()]
    if not stamps:
        raise LoadError(path, "no timestamps")
    arr = np.array(stamps)
    if (np.diff(arr) < 0).any():
        raise LoadError(path, "timestamps are not monotone")
    return arr


# -- sequence manifest ---------------------------------------------------------

@dataclass
class DatasetManifest:
    """Per-frame file paths of one sequence plus its calibration."""

    sequence_id: str
    root: pathlib.Path
    image_paths: list
    lidar_paths: list
    depth_pred_paths: list = field(default_factory=list)
    calib_path: pathlib.Path | None = None
    pose_path: pathlib.Path | None = None
    timestamps: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return len(self.image_paths)


@dataclass
class LoadedSequence:
    """A fully loaded sequence; frames decode lazily through the manifest."""

    manifest: DatasetManifest
    calibration: CalibrationSet
    gt_poses: list | None

    @property
    def n_frames(self) -> int:
        return self.manifest.n_frames

    def image(self, i: int) -> np.ndarray:
        return read_image(self.manifest.image_paths[i])

    def lidar(self, i: int) -> np.ndarray:
        return read_lidar_bin(self.manifest.lidar_paths[i])

    def pretrained_depth(self, i: int) -> np.ndarray:
        if not self.manifest.depth_pred_paths:
            raise LoadError(self.manifest.root, "sequence has no depth predictions")
        path = self.manifest.depth_pred_paths[i]
        if str(path).endswith(".pgm"):
            return read_depth_pgm(path)
        return read_depth_raw(path)


def _sorted_files(directory: pathlib.Path, suffixes) -> list:
    out = []
    for suffix in suffixes:
        out.extend(directory.glob(f"*{suffix}"))
    return sorted(out)


def load_sequence(root, sequence_id: str = "") -> LoadedSequence:
    """Load a sequence directory (the layout synth.write_dataset emits).

    ``root/sequence_id`` must contain ``image_2/``, ``velodyne/`` and
    ``calib.txt``; ``depth_pred/``, ``poses.txt`` and ``times.txt`` are
    optional.  Frame counts must agree across the streams present.
    """
    base = pathlib.Path(root)
    if sequence_id:
        base = base / sequence_id
    if not base.is_dir():
        raise LoadError(base, "not a directory")

    image_dir = base / "image_2"
    lidar_dir = base / "velodyne"
    if not image_dir.is_dir():
        raise LoadError(image_dir, "missing image directory")
    if not lidar_dir.is_dir():
        raise LoadError(lidar_dir, "missing velodyne directory")
    images = _sorted_files(image_dir, (".pgm", ".ppm", ".png"))
    lidars = _sorted_files(lidar_dir, (".bin",))
    if not images:
        raise LoadError(image_dir, "no images")
    if len(images) != len(lidars):
        raise LoadError(
            base, f"{len(images)} images but {len(lidars)} LiDAR scans")

    depth_dir = base / "depth_pred"
    depth_paths = _sorted_files(depth_dir, (".f32", ".pgm")) if depth_dir.is_dir() else []
    if depth_paths and len(depth_paths) != len(images):
        raise LoadError(
            depth_dir, f"{len(depth_paths)} depth files but {len(images)} images")

    calib_path = base / "calib.txt"
    if not calib_path.is_file():
        raise LoadError(calib_path, "missing calibration")
    calibration = parse_calibration(calib_path.read_text())

    pose_path = base / "poses.txt"
    gt_poses = None
    if pose_path.is_file():
        gt_poses = read_poses(pose_path)
        if len(gt_poses) != len(images):
            raise LoadError(pose_path, f"{len(gt_poses)} poses but {len(images)} images")
    else:
        pose_path = None

    times_path = base / "times.txt"
    timestamps = None
    if times_path.is_file():
        timestamps = read_timestamps(times_path)
        if len(timestamps) != len(images):
            raise LoadError(
                times_path, f"{len(timestamps)} timestamps but {len(images)} images")

    manifest = DatasetManifest(
        sequence_id=sequence_id or base.name,
        root=base,
        image_paths=images,
        lidar_paths=lidars,
        depth_pred_paths=depth_paths,
        calib_path=calib_path,
        pose_path=pose_path,
        timestamps=timestamps,
    )
    return LoadedSequence(manifest=manifest, calibration=calibration,
                          gt_poses=gt_poses)


def nearest_timestamp_align(reference: np.ndarray, other: np.ndarray,
                            max_offset: float = 0.025):
    """Pair each reference stamp with the nearest stamp of the other stream.

    Returns (pairs, dropped): ``pairs`` is a list of index tuples
    ``(i_ref, i_other)``; associations with |dt| above ``max_offset``
    (seconds) land in ``dropped`` instead.  Raises LoadError-style
    ValueError when nothing associates.
    """
    reference = np.asarray(reference, dtype=float)
    other = np.asarray(other, dtype=float)
    if reference.size == 0 or other.size == 0:
        raise ValueError("cannot align an empty stream")
    idx = np.searchsorted(other, reference)
    idx_lo = np.clip(idx - 1, 0, other.size - 1)
    idx_hi = np.clip(idx, 0, other.size - 1)
    pick_hi = np.abs(other[idx_hi] - reference) < np.abs(other[idx_lo] - reference)
    nearest = np.where(pick_hi, idx_hi, idx_lo)
    dt = np.abs(other[nearest] - reference)
    pairs = [(int(i), int(j)) for i, j in enumerate(nearest) if dt[i] <= max_offset]
    dropped = [(int(i), float(dt[i])) for i in range(reference.size)
               if dt[i] > max_offset]
    if not pairs:
        raise ValueError("no associations within the time threshold")
    return pairs, dropped
