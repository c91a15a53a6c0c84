"""Dataset ingestion, synthetic sequence generation, prior-feature files, and
trajectory import/export.

Supported layouts:
  TUM-RGBD       rgb.txt / depth.txt / groundtruth.txt, depth PNGs in 1/5000 m
  Replica-like   frame%06d.png|jpg, depth%06d.png, optional semantic%06d.png and
                 prior%06d.feat, traj.txt with 4x4 row-major camera-to-world
                 poses, optional config.txt with a depth_scale entry

The synthetic generator renders every frame with the brute-force per-pixel
compositor (never the tiled path) so generated sequences double as an exact
oracle for the rasterizer.  Generated frames are pre-quantized to their
on-disk precision, which makes write/load round trips bit-exact.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DimensionError, FormatError
from .rasterizer import CameraIntrinsics, Pose, RenderFlags, dominant_contributor, render_reference
from .scene import GaussianMap, quat_to_rotmat, rotmat_to_quat
from .semantics import IGNORE_LABEL, TextQuerySet

log = logging.getLogger(__name__)

TUM_DEPTH_SCALE = 5000.0
REPLICA_DEPTH_SCALE = 6553.5
ASSOCIATION_TOLERANCE = 0.02
FEATURE_MAGIC = b"GSFF"
# synthetic pixels below this composited alpha carry no surface: depth invalid,
# label ignored (a real sensor returns nothing there)
COVERAGE_MIN_ALPHA = 0.5


@dataclass
class Frame:
    """One RGB-D observation; label map, prior features and pose are optional."""

    frame_id: int
    timestamp: float
    rgb: np.ndarray                      # (H, W, 3) in [0, 1]
    depth: np.ndarray                    # (H, W) meters, 0 = invalid
    gt_label: np.ndarray | None = None   # (H, W) uint8, 255 = ignore
    prior_feature_path: str | None = None
    gt_pose: Pose | None = None          # world-to-camera
    _prior_cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise DimensionError("rgb and depth spatial sizes differ")

    def prior_features(self) -> np.ndarray | None:
        if self._prior_cache is None and self.prior_feature_path is not None:
            self._prior_cache = load_prior_features(self.prior_feature_path)
        return self._prior_cache


@dataclass
class SequenceData:
    frames: list
    gt_trajectory: list                  # (timestamp, Pose world-to-camera)
    dropped: int = 0


# ---------------------------------------------------------------------------
# image and feature files
# ---------------------------------------------------------------------------

def save_color_png(path, rgb: np.ndarray):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_color_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_depth_png(path, depth_m: np.ndarray, scale: float):
    arr = np.clip(np.round(np.asarray(depth_m) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_depth_png(path, scale: float) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / scale


def save_label_png(path, labels: np.ndarray):
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def load_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def write_float_planar(path, array: np.ndarray):
    """Raw planar float file: 16-byte header `GSFF` + u32 H,W,C (LE), then
    float32 data stored channel-major (C planes of H x W)."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise DimensionError("expected an (H, W, C) array")
    H, W, C = array.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", H, W, C))
        fh.write(np.ascontiguousarray(array.transpose(2, 0, 1), dtype="<f4").tobytes())


def load_prior_features(path) -> np.ndarray:
    """Read a planar float feature map back as (H, W, C) float64."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad feature-file header")
        H, W, C = struct.unpack("<III", head[4:])
        data = fh.read()
    expected = 4 * H * W * C
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4").reshape(C, H, W)
    return arr.transpose(1, 2, 0).astype(np.float64)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def export_trajectory(trajectory, path):
    """TUM-convention text export: `timestamp tx ty tz qx qy qz qw` per line,
    camera-to-world, 9 significant digits.  trajectory is [(timestamp, Pose)]."""
    with open(path, "w") as fh:
        for ts, pose in trajectory:
            c = pose.camera_center()
            q = rotmat_to_quat(pose.rotation.T)
            vals = [ts, c[0], c[1], c[2], q[1], q[2], q[3], q[0]]
            fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def load_trajectory(path):
    """Inverse of export_trajectory; returns [(timestamp, Pose world-to-cam)]."""
    out = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise FormatError(f"{path}: expected 8 fields per line")
            ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            R_wc = quat_to_rotmat(np.array([qw, qx, qy, qz]))
            pose = Pose(R_wc.T, -R_wc.T @ np.array([tx, ty, tz]))
            out.append((ts, pose))
    return out


# ---------------------------------------------------------------------------
# TUM-RGBD
# ---------------------------------------------------------------------------

def _read_file_list(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            entries.append((float(parts[0]), parts[1:]))
    return entries


def _nearest(ts: float, stamps: np.ndarray) -> int:
    i = int(np.searchsorted(stamps, ts))
    best = min(max(i - 1, 0), len(stamps) - 1)
    if i < len(stamps) and abs(stamps[i] - ts) < abs(stamps[best] - ts):
        best = i
    return best


def load_tum_sequence(root) -> SequenceData:
    """Load a TUM-RGBD directory (rgb.txt, depth.txt, groundtruth.txt).

    RGB/depth/ground truth are associated by nearest timestamp within 20 ms;
    rgb frames without a depth match are dropped (counted and logged).  Depth
    PNG values are divided by 5000 to meters.
    """
    rgb_list = _read_file_list(os.path.join(root, "rgb.txt"))
    depth_list = _read_file_list(os.path.join(root, "depth.txt"))
    gt_list = _read_file_list(os.path.join(root, "groundtruth.txt"))

    depth_ts = np.array([t for t, _ in depth_list])
    gt_ts = np.array([t for t, _ in gt_list])
    gt_traj = []
    for ts, vals in gt_list:
        tx, ty, tz, qx, qy, qz, qw = map(float, vals[:7])
        R_wc = quat_to_rotmat(np.array([qw, qx, qy, qz]))
        gt_traj.append((ts, Pose(R_wc.T, -R_wc.T @ np.array([tx, ty, tz]))))

    frames = []
    dropped = 0
    for ts, (rgb_rel, *_rest) in rgb_list:
        j = _nearest(ts, depth_ts)
        if abs(depth_ts[j] - ts) > ASSOCIATION_TOLERANCE:
            dropped += 1
            continue
        rgb = load_color_png(os.path.join(root, rgb_rel))
        depth = load_depth_png(os.path.join(root, depth_list[j][1][0]), TUM_DEPTH_SCALE)
        gt_pose = None
        if len(gt_ts):
            k = _nearest(ts, gt_ts)
            if abs(gt_ts[k] - ts) <= ASSOCIATION_TOLERANCE:
                gt_pose = gt_traj[k][1]
        frames.append(Frame(frame_id=len(frames), timestamp=ts, rgb=rgb, depth=depth,
                            gt_pose=gt_pose))
    if dropped:
        log.warning("dropped %d rgb frames without a depth match within %.0f ms",
                    dropped, ASSOCIATION_TOLERANCE * 1e3)
    if not frames:
        raise FormatError(f"{root}: no rgb/depth associations within tolerance")
    return SequenceData(frames=frames, gt_trajectory=gt_traj, dropped=dropped)


# ---------------------------------------------------------------------------
# Replica-like directories
# ---------------------------------------------------------------------------

def _read_sidecar_config(root) -> dict:
    cfg = {}
    path = os.path.join(root, "config.txt")
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if "=" in line:
                    k, v = line.split("=", 1)
                    cfg[k.strip()] = v.strip()
    return cfg


def load_replica_like(root) -> SequenceData:
    """Load a Replica-style directory of numbered frames plus traj.txt.

    traj.txt holds one 4x4 row-major camera-to-world pose per frame; the depth
    scale comes from a `depth_scale` entry in config.txt (default 6553.5).
    Missing semantic/prior files simply leave those fields absent.
    """
    traj_path = os.path.join(root, "traj.txt")
    if not os.path.exists(traj_path):
        raise FileNotFoundError(traj_path)
    poses = []
    with open(traj_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            vals = np.array(line.split(), dtype=np.float64)
            if vals.size != 16:
                raise FormatError(f"{traj_path}: expected 16 values per line")
            T_wc = vals.reshape(4, 4)
            poses.append(Pose.from_matrix(np.linalg.inv(T_wc)))

    depth_scale = float(_read_sidecar_config(root).get("depth_scale", REPLICA_DEPTH_SCALE))
    rgb_paths = []
    i = 0
    while True:
        png = os.path.join(root, f"frame{i:06d}.png")
        jpg = os.path.join(root, f"frame{i:06d}.jpg")
        if os.path.exists(png):
            rgb_paths.append(png)
        elif os.path.exists(jpg):
            rgb_paths.append(jpg)
        else:
            break
        i += 1
    if not rgb_paths:
        raise FileNotFoundError(os.path.join(root, "frame000000.png"))
    if len(rgb_paths) != len(poses):
        raise FormatError(
            f"{root}: {len(rgb_paths)} frames but {len(poses)} poses in traj.txt")

    frames = []
    gt_traj = []
    for i, rgb_path in enumerate(rgb_paths):
        depth_path = os.path.join(root, f"depth{i:06d}.png")
        if not os.path.exists(depth_path):
            raise FormatError(f"{root}: missing {os.path.basename(depth_path)}")
        sem_path = os.path.join(root, f"semantic{i:06d}.png")
        prior_path = os.path.join(root, f"prior{i:06d}.feat")
        ts = i / 30.0
        frames.append(Frame(
            frame_id=i, timestamp=ts,
            rgb=load_color_png(rgb_path),
            depth=load_depth_png(depth_path, depth_scale),
            gt_label=load_label_png(sem_path) if os.path.exists(sem_path) else None,
            prior_feature_path=prior_path if os.path.exists(prior_path) else None,
            gt_pose=poses[i]))
        gt_traj.append((ts, poses[i]))
    return SequenceData(frames=frames, gt_trajectory=gt_traj, dropped=0)


def write_replica_like(root, frames, depth_scale: float = REPLICA_DEPTH_SCALE):
    """Write frames (with gt poses) as a Replica-like directory; inverse of
    load_replica_like for generator output."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "config.txt"), "w") as fh:
        fh.write(f"depth_scale = {depth_scale!r}\n")
    lines = []
    for i, f in enumerate(frames):
        save_color_png(os.path.join(root, f"frame{i:06d}.png"), f.rgb)
        save_depth_png(os.path.join(root, f"depth{i:06d}.png"), f.depth, depth_scale)
        if f.gt_label is not None:
            save_label_png(os.path.join(root, f"semantic{i:06d}.png"), f.gt_label)
        if f.gt_pose is None:
            raise DimensionError("replica-like export requires ground-truth poses")
        T_wc = f.gt_pose.inverse().matrix()
        lines.append(" ".join(f"{v:.17g}" for v in T_wc.ravel()))
    with open(os.path.join(root, "traj.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

# distinct base colors for up to 16 classes; jittered per splat for texture
_PALETTE = np.array([
    [0.85, 0.25, 0.25], [0.25, 0.80, 0.30], [0.25, 0.40, 0.90], [0.90, 0.80, 0.25],
    [0.80, 0.30, 0.85], [0.30, 0.85, 0.85], [0.95, 0.55, 0.20], [0.60, 0.60, 0.60],
    [0.50, 0.20, 0.20], [0.20, 0.50, 0.20], [0.20, 0.20, 0.55], [0.55, 0.55, 0.20],
    [0.55, 0.25, 0.55], [0.25, 0.55, 0.55], [0.75, 0.45, 0.45], [0.45, 0.45, 0.75],
])


@dataclass
class SyntheticSceneSpec:
    """Deterministic desk-scale scene: same spec, same seed -> identical output.

    The scene is a central cluster of splats plus a textured background shell
    (a bg_fraction share of the splats on a sphere outside the trajectory), so
    that rays cross several layers: composited alpha saturates like an indoor
    scene with walls, and every pixel carries valid depth.
    """

    seed: int = 0
    n_gaussians: int = 500
    num_classes: int = 8
    trajectory: str = "orbit"            # "orbit" | "line"
    n_frames: int = 100
    width: int = 64
    height: int = 64
    fx: float = 56.0
    fy: float = 56.0
    orbit_radius: float = 1.0
    orbit_degrees: float = 50.0
    line_length: float = 0.4
    scene_radius: float = 0.5
    scale_range: tuple = (0.030, 0.070)
    opacity_logit_range: tuple = (3.0, 4.5)
    bg_fraction: float = 0.45
    bg_radius: float = 2.4
    bg_scale_range: tuple = (0.16, 0.26)
    depth_scale: float = REPLICA_DEPTH_SCALE

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.fx, fy=self.fy,
                                cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0,
                                width=self.width, height=self.height,
                                z_near=0.05, z_far=20.0)


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at `center` looking at `target`
    (x right, y down, z forward)."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, -1.0, 0.0])     # world -y is "up" so image y points down
    right = np.cross(up, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=1)
    return Pose(R_wc.T, -R_wc.T @ center)


def synthetic_poses(spec: SyntheticSceneSpec) -> list[Pose]:
    poses = []
    for k in range(spec.n_frames):
        s = k / max(spec.n_frames - 1, 1)
        if spec.trajectory == "orbit":
            ang = np.deg2rad(spec.orbit_degrees) * s
            center = spec.orbit_radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
            poses.append(_look_at(center, np.zeros(3)))
        elif spec.trajectory == "line":
            center = np.array([-spec.line_length / 2 + spec.line_length * s, 0.0,
                               -spec.orbit_radius])
            poses.append(_look_at(center, np.zeros(3)))
        else:
            raise FormatError(f"unknown trajectory type {spec.trajectory!r}")
    return poses


def generate_synthetic(spec: SyntheticSceneSpec):
    """Build a ground-truth map and render its frame sequence.

    Returns (gt_map, frames, classes): opaque well-separated splats with
    class-colored appearance and one-hot class features; per-frame RGB, depth
    and label maps rendered by the brute-force compositor, quantized to
    on-disk precision; exact poses.  Labels take the class of the per-pixel
    dominant splat, IGNORE where coverage is under 0.5 alpha.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    C = max(spec.num_classes, 1)
    gmap = GaussianMap(feature_dim=C)
    classes = np.zeros(n, dtype=np.int64)
    if n:
        n_bg = int(n * spec.bg_fraction)
        n_fg = n - n_bg
        u = rng.normal(size=(n_fg, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        fg_pos = u * (spec.scene_radius * np.cbrt(rng.uniform(0.05, 1.0, size=n_fg)))[:, None]
        # single-layer background wall: Fibonacci-sphere points with a mild
        # jitter, sized to tile the shell without deep stacking (frames then
        # carry an alpha level a reconstructed map can actually reach)
        k = np.arange(n_bg) + 0.5
        phi = np.arccos(1 - 2 * k / max(n_bg, 1))
        theta = np.pi * (1 + np.sqrt(5.0)) * k
        bg_dir = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi),
                           np.cos(phi)], axis=1)
        bg_dir = bg_dir + rng.normal(scale=0.02, size=(n_bg, 3))
        bg_dir /= np.linalg.norm(bg_dir, axis=1, keepdims=True)
        pos = np.vstack([fg_pos, bg_dir * spec.bg_radius])
        quat = rng.normal(size=(n, 4))
        quat /= np.linalg.norm(quat, axis=1, keepdims=True)
        spacing = np.sqrt(4.0 * np.pi * spec.bg_radius**2 / max(n_bg, 1))
        base_scale = np.concatenate([
            rng.uniform(*spec.scale_range, size=n_fg),
            np.full(n_bg, 0.62 * spacing),
        ])
        ls = np.log(base_scale)[:, None] + rng.uniform(-0.12, 0.12, size=(n, 3))
        ol = rng.uniform(*spec.opacity_logit_range, size=n)
        # classes are spatially coherent (octant of position), so class
        # boundaries are rare and blend pixels mostly mix one class
        octant = ((pos[:, 0] > 0).astype(np.int64) + 2 * (pos[:, 1] > 0)
                  + 4 * (pos[:, 2] > 0))
        classes = octant % C
        # strongly textured: a class hue tint over a per-splat random color,
        # so neighbors stay visually distinct (parallax constrains geometry)
        col = 0.35 * _PALETTE[classes % len(_PALETTE)] + 0.65 * rng.uniform(
            0.02, 0.98, size=(n, 3))
        col = np.clip(col, 0.02, 0.98)
        feat = np.zeros((n, gmap.feature_dim))
        feat[np.arange(n), classes] = 10.0
        gmap.append_arrays(pos, quat, ls, ol, col, feat)

    intr = spec.intrinsics()
    frames = []
    for k, pose in enumerate(synthetic_poses(spec)):
        out = render_reference(gmap, pose, intr, RenderFlags())
        covered = out.alpha_image >= COVERAGE_MIN_ALPHA
        rgb = np.round(np.clip(out.color_image, 0.0, 1.0) * 255.0) / 255.0
        # a depth sensor measures the surface: normalize the composite by its
        # coverage before quantizing
        surface = out.depth_image / np.maximum(out.alpha_image, 1e-6)
        depth = np.round(np.clip(surface, 0.0, 65535.0 / spec.depth_scale)
                         * spec.depth_scale) / spec.depth_scale
        depth[~covered] = 0.0
        winner = dominant_contributor(gmap, pose, intr)
        labels = np.where((winner >= 0) & covered,
                          classes[np.clip(winner, 0, None)] if n else 0,
                          IGNORE_LABEL).astype(np.uint8)
        frames.append(Frame(frame_id=k, timestamp=k / 30.0, rgb=rgb, depth=depth,
                            gt_label=labels, gt_pose=pose))
    return gmap, frames, classes


def orthonormal_queries(n_labels: int, dim: int, rng: np.random.Generator) -> TextQuerySet:
    """Random orthonormal query embeddings (one per synthetic class)."""
    if dim < n_labels:
        raise DimensionError("query dimension must be >= number of labels")
    a = rng.normal(size=(dim, dim))
    q, _ = np.linalg.qr(a)
    return TextQuerySet(labels=[f"class_{i}" for i in range(n_labels)],
                        vectors=q[:n_labels])


def attach_textual_priors(frames, queries: TextQuerySet, out_dir,
                          corruption: float = 0.1,
                          rng: np.random.Generator | None = None):
    """Synthesize noisy prior feature maps from labels and attach them to frames.

    Every labeled pixel gets its class query vector; a `corruption` fraction is
    replaced by a different class's vector (salt-and-pepper); ignore pixels get
    zero vectors.  Files are written in the planar float format.
    """
    rng = rng or np.random.default_rng(0)
    os.makedirs(out_dir, exist_ok=True)
    L, M = queries.vectors.shape
    for f in frames:
        if f.gt_label is None:
            continue
        labels = f.gt_label
        valid = labels != IGNORE_LABEL
        prior = np.zeros(labels.shape + (M,))
        prior[valid] = queries.vectors[labels[valid].astype(np.int64)]
        idx = np.flatnonzero(valid)
        n_bad = int(round(corruption * idx.size))
        if n_bad:
            bad = rng.choice(idx, size=n_bad, replace=False)
            rows, cols = np.unravel_index(bad, labels.shape)
            true_cls = labels[rows, cols].astype(np.int64)
            wrong = (true_cls + rng.integers(1, L, size=n_bad)) % L
            prior[rows, cols] = queries.vectors[wrong]
        path = os.path.join(out_dir, f"prior{f.frame_id:06d}.feat")
        write_float_planar(path, prior)
        f.prior_feature_path = path
        f._prior_cache = None
    return frames
