"""Full-system orchestration: tracking, keyframing, mapping, semantics, and
atomic map publication, in a deterministic single-thread mode (default) or an
opt-in dual-thread mode with a bounded keyframe queue.

The single-thread mode is a strict serialization of the dual-thread per-frame
operations (track; if keyframe: seed, map, semantics, publish) and is the
reference behavior for evaluation.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, is_dataclass

import numpy as np

from . import dataio, metrics, semantics
from .errors import ConfigError, FormatError, NumericError, TrackingError
from .mapper import KeyframeWindow, MappingConfig, covisibility_iou, is_keyframe, seed_gaussians
from .mapper import optimize_map
from .optimizer import DEFAULT_RATES, MapOptimizer
from .rasterizer import CameraIntrinsics, Pose, RenderFlags, render
from .scene import GaussianMap, VisibilityRecord
from .semantics import (FeatureHead, HeadOptimizer, SemanticConfig, classify_with_queries,
                        optimize_semantics, predict_labels)
from .tracker import TrackingConfig, track_frame

log = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"               # synthetic | tum | replica
    root: str = ""
    # intrinsics for on-disk datasets (synthetic sequences carry their own)
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    z_near: float = 0.05
    z_far: float = 20.0
    synthetic: dataio.SyntheticSceneSpec = field(default_factory=dataio.SyntheticSceneSpec)
    prior_corruption: float = 0.1         # synthetic textual-prior noise


@dataclass
class PipelineConfig:
    feature_dim: int = 128
    seed: int = 0
    single_thread: bool = True
    semantics_enabled: bool = True
    window_length: int = 10
    output_dir: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    semantics: SemanticConfig = field(default_factory=SemanticConfig)
    rates: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        cfg = cls()
        cfg.apply_overrides(_parse_flat_config(path))
        return cfg

    def apply_overrides(self, flat: dict):
        for key, raw in flat.items():
            _assign(self, key.split("."), raw, key)


def _parse_flat_config(path) -> dict:
    """Flat `dotted.key = value` text config; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{ln}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        if "/" in raw:
            num, den = raw.split("/", 1)
            return float(num) / float(den)
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() for p in [p] if p]
        return tuple(float(p) for p in parts)
    return raw


def _assign(obj, parts, raw, full_key):
    head = parts[0]
    if len(parts) == 1:
        if isinstance(obj, dict):
            obj[head] = _coerce(raw, float(0.0))
            return
        if not hasattr(obj, head):
            raise ConfigError(f"unknown config key {full_key!r}")
        cur = getattr(obj, head)
        if is_dataclass(cur):
            raise ConfigError(f"{full_key!r} names a section, not a value")
        setattr(obj, head, _coerce(raw, cur))
        return
    if isinstance(obj, dict):
        raise ConfigError(f"unknown config key {full_key!r}")
    if not hasattr(obj, head):
        raise ConfigError(f"unknown config key {full_key!r}")
    _assign(getattr(obj, head), parts[1:], raw, full_key)


class MapSlot:
    """Atomically swappable map snapshot shared between tracking and mapping.

    publish() stores an independent copy, so a snapshot observed by the
    tracker can never be mutated underneath it: readers see either the old or
    the new map, never a partially updated one.
    """

    def __init__(self, initial: GaussianMap):
        self._lock = threading.Lock()
        self._map = initial.copy()
        self.version = 0

    def publish(self, working: GaussianMap) -> GaussianMap:
        snap = working.copy()
        with self._lock:
            self._map = snap
            self.version += 1
        return snap

    def snapshot(self) -> GaussianMap:
        with self._lock:
            return self._map


@dataclass
class KeyframeInfo:
    frame_id: int
    pose: Pose
    n_gaussians: int
    post_semantic_acc: float | None = None
    final_semantic_acc: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None


@dataclass
class RunReport:
    config: PipelineConfig
    trajectory: list                       # (timestamp, Pose) per frame, estimated
    gt_trajectory: list
    gmap: GaussianMap
    keyframes: list
    frames: list
    intrinsics: CameraIntrinsics
    metrics: dict
    runtime_s: float
    queries: object | None = None          # TextQuerySet for textual runs
    head: FeatureHead | None = None
    tracking_failures: int = 0


def _load_dataset(cfg: PipelineConfig):
    ds = cfg.dataset
    if ds.kind == "synthetic":
        spec = ds.synthetic
        gt_map, frames, _classes = dataio.generate_synthetic(spec)
        intr = spec.intrinsics()
        gt_traj = [(f.timestamp, f.gt_pose) for f in frames]
        return frames, gt_traj, intr
    if ds.kind == "tum":
        seq = dataio.load_tum_sequence(ds.root)
    elif ds.kind == "replica":
        seq = dataio.load_replica_like(ds.root)
    else:
        raise ConfigError(f"unknown dataset kind {ds.kind!r}")
    if seq.frames:
        h, w = seq.frames[0].depth.shape
    intr = CameraIntrinsics(fx=ds.fx, fy=ds.fy, cx=ds.cx, cy=ds.cy,
                            width=w, height=h, z_near=ds.z_near, z_far=ds.z_far)
    return seq.frames, seq.gt_trajectory, intr


class _MappingSide:
    """Owns the working map, its optimizer, the keyframe window and semantics."""

    def __init__(self, cfg: PipelineConfig, slot: MapSlot, intr: CameraIntrinsics,
                 queries=None):
        self.cfg = cfg
        self.slot = slot
        self.intr = intr
        self.queries = queries
        self.gmap = GaussianMap(cfg.feature_dim)
        self.optimizer = MapOptimizer(self.gmap, dict(DEFAULT_RATES, **cfg.rates,
                                                      feature_lr=cfg.semantics.feature_lr))
        self.window = KeyframeWindow(max_len=cfg.window_length)
        self.head = None
        self.head_opt = None
        if cfg.semantics_enabled and cfg.semantics.mode == "textual":
            self.head = FeatureHead.create(
                cfg.semantics.prior_dim, cfg.feature_dim,
                (cfg.semantics.head_height, cfg.semantics.head_width),
                rng=np.random.default_rng(cfg.seed + 17))
            self.head_opt = HeadOptimizer(self.head, cfg.semantics.head_lr)
        self.keyframes: list[KeyframeInfo] = []

    def process_keyframe(self, frame, pose: Pose, visibility, is_initial: bool):
        """Seed, optimize geometry then semantics, publish.

        The keyframe's visibility record is re-taken on the optimized map so
        it covers the splats just seeded; otherwise subsequent co-visibility
        comparisons would run on a stale prefix that cannot register view
        change over the new geometry.  Returns that record."""
        cfg = self.cfg
        rendered = render(self.gmap, pose, self.intr, RenderFlags())
        new = seed_gaussians(frame, pose, self.gmap, rendered, self.intr,
                             cfg.mapping.rho_pc, rng=None)
        self.gmap.append(new)
        self.optimizer.sync_size(self.gmap)
        provisional = visibility
        if provisional is None:
            provisional = VisibilityRecord(frame.frame_id,
                                           np.zeros(len(self.gmap), dtype=bool),
                                           len(self.gmap))
        self.window.add(frame.frame_id, frame, pose, provisional)

        iters = cfg.mapping.init_iterations if is_initial else cfg.mapping.kf_iterations
        optimize_map(self.gmap, self.window, cfg.mapping, self.intr, iters, self.optimizer)
        visibility = render(self.gmap, pose, self.intr,
                            RenderFlags(record_visibility=True),
                            frame_id=frame.frame_id).visibility
        self.window.entries[-1] = (frame.frame_id, frame, pose, visibility)
        self.gmap.visibility_records[frame.frame_id] = visibility

        info = KeyframeInfo(frame.frame_id, pose, n_gaussians=len(self.gmap))
        if cfg.semantics_enabled:
            optimize_semantics(self.gmap, frame, pose, self.intr, cfg.semantics,
                               self.optimizer, head=self.head, head_opt=self.head_opt,
                               is_initial=is_initial)
            info.post_semantic_acc = self._label_accuracy(frame, pose)
        self.keyframes.append(info)
        self.slot.publish(self.gmap)
        return visibility

    def _label_accuracy(self, frame, pose: Pose, gmap: GaussianMap | None = None) -> float | None:
        """Fraction of valid pixels whose predicted label matches the ground truth."""
        if frame.gt_label is None:
            return None
        gmap = gmap if gmap is not None else self.gmap
        out = render(gmap, pose, self.intr, RenderFlags(render_features=True))
        if self.cfg.semantics.mode == "ground_truth":
            pred = predict_labels(out.feature_image, self.cfg.semantics.num_classes)
        else:
            head_out = semantics.apply_head(self.head, out.feature_image)
            pred = classify_with_queries(head_out, self.queries)
        valid = frame.gt_label != semantics.IGNORE_LABEL
        if not valid.any():
            return None
        return float((pred[valid] == frame.gt_label[valid]).mean())


def run(cfg: PipelineConfig) -> RunReport:
    """Track every frame, map keyframes, optimize semantics, evaluate.

    Per frame: track against the latest published snapshot (constant-velocity
    init); frames whose co-visibility IoU against the most recent keyframe
    drops under tau become keyframes and are seeded, optimized, and published.
    Frame 0 bootstraps the map with the initialization iteration budget.
    """
    t_start = time.time()
    frames, gt_traj, intr = _load_dataset(cfg)
    if not frames:
        raise FormatError("dataset contains no frames")

    queries = None
    if (cfg.semantics_enabled and cfg.semantics.mode == "textual"
            and cfg.dataset.kind == "synthetic"):
        queries = dataio.orthonormal_queries(cfg.dataset.synthetic.num_classes,
                                             cfg.semantics.prior_dim,
                                             np.random.default_rng(cfg.seed + 29))
        prior_dir = (cfg.output_dir or ".") + "/priors"
        dataio.attach_textual_priors(frames, queries, prior_dir,
                                     corruption=cfg.dataset.prior_corruption,
                                     rng=np.random.default_rng(cfg.seed + 31))

    slot = MapSlot(GaussianMap(cfg.feature_dim))
    side = _MappingSide(cfg, slot, intr, queries=queries)

    # Frame 0 bootstraps the map synchronously in both modes.
    f0 = frames[0]
    pose0 = f0.gt_pose.copy() if f0.gt_pose is not None else Pose.identity()
    last_kf_record = side.process_keyframe(f0, pose0, None, is_initial=True)
    trajectory = [(f0.timestamp, pose0)]

    jobs = queue.Queue(maxsize=8) if not cfg.single_thread else None
    worker = None
    if jobs is not None:
        def _worker():
            while True:
                job = jobs.get()
                if job is None:
                    return
                side.process_keyframe(*job, is_initial=False)
        worker = threading.Thread(target=_worker, name="mapping", daemon=True)
        worker.start()

    tracking_failures = 0
    for frame in frames[1:]:
        init = _extrapolate(trajectory)
        snapshot = slot.snapshot()
        try:
            result = track_frame(snapshot, frame, init, intr, cfg.tracking,
                                 trans_delta_lr=_rate(cfg, "trans_delta_lr"),
                                 rot_delta_lr=_rate(cfg, "rotation_delta_lr"))
            pose, vis = result.pose, result.visibility
        except (TrackingError, NumericError) as exc:
            log.warning("tracking failed on frame %d (%s); extrapolating", frame.frame_id, exc)
            tracking_failures += 1
            pose = init
            vis = render(snapshot, pose, intr, RenderFlags(record_visibility=True),
                         frame_id=frame.frame_id).visibility
        trajectory.append((frame.timestamp, pose))

        iou = covisibility_iou(vis, last_kf_record)
        if is_keyframe(iou, cfg.mapping):
            if jobs is None:
                # reference mode: compare later frames against the keyframe's
                # post-mapping record (covers the freshly seeded splats)
                last_kf_record = side.process_keyframe(frame, pose, vis,
                                                       is_initial=False)
            else:
                last_kf_record = vis
                jobs.put((frame, pose, vis))

    if jobs is not None:
        jobs.put(None)
        worker.join()

    report = RunReport(config=cfg, trajectory=trajectory, gt_trajectory=gt_traj,
                       gmap=slot.snapshot(), keyframes=side.keyframes, frames=frames,
                       intrinsics=intr, metrics={}, runtime_s=0.0, queries=queries,
                       head=side.head, tracking_failures=tracking_failures)
    _evaluate(report, side)
    report.runtime_s = time.time() - t_start
    report.metrics["runtime_s"] = round(report.runtime_s, 3)
    return report


def _rate(cfg: PipelineConfig, name: str) -> float:
    return float(cfg.rates.get(name, DEFAULT_RATES[name]))


def _extrapolate(trajectory) -> Pose:
    """Constant-velocity pose prediction from the last two estimates."""
    if len(trajectory) >= 2:
        prev, last = trajectory[-2][1], trajectory[-1][1]
        rel = last.compose(prev.inverse())
        return rel.compose(last)
    return trajectory[-1][1].copy()


def _evaluate(report: RunReport, side: _MappingSide):
    cfg = report.config
    gmap = report.gmap
    intr = report.intrinsics
    m: dict = {
        "n_frames": len(report.frames),
        "n_keyframes": len(report.keyframes),
        "n_gaussians": len(gmap),
        "tracking_failures": report.tracking_failures,
    }

    frames_by_id = {f.frame_id: f for f in report.frames}
    gt_by_id = {f.frame_id: f.gt_pose for f in report.frames if f.gt_pose is not None}
    est = []
    gt = []
    for (ts, pose), frame in zip(report.trajectory, report.frames):
        if frame.frame_id in gt_by_id:
            est.append(pose.camera_center())
            gt.append(gt_by_id[frame.frame_id].camera_center())
    if len(est) >= 2:
        m["ate_rmse_cm"] = metrics.ate_rmse(np.array(est), np.array(gt))

    est_pose_by_id = {f.frame_id: p for f, (_, p) in zip(report.frames, report.trajectory)}
    psnrs = []
    ssims = []
    label_pred_all = []
    label_gt_all = []
    for info in report.keyframes:
        frame = frames_by_id[info.frame_id]
        pose = est_pose_by_id[info.frame_id]
        out = render(gmap, pose, intr, RenderFlags())
        info.psnr_db = metrics.psnr(out.color_image, frame.rgb)
        info.ssim = metrics.ssim(out.color_image, frame.rgb)
        psnrs.append(info.psnr_db)
        ssims.append(info.ssim)
        if cfg.semantics_enabled and frame.gt_label is not None:
            info.final_semantic_acc = side._label_accuracy(frame, pose, gmap=gmap)
            if cfg.semantics.mode == "ground_truth":
                fo = render(gmap, pose, intr, RenderFlags(render_features=True))
                label_pred_all.append(predict_labels(fo.feature_image,
                                                     cfg.semantics.num_classes).ravel())
                label_gt_all.append(frame.gt_label.ravel())
    if psnrs:
        m["mean_kf_psnr_db"] = float(np.mean(psnrs))
        m["mean_kf_ssim"] = float(np.mean(ssims))
    if label_pred_all:
        scores = metrics.seg_scores(np.concatenate(label_pred_all),
                                    np.concatenate(label_gt_all),
                                    cfg.semantics.num_classes)
        m["semantic_acc_pct"] = scores.accuracy
        m["semantic_miou_pct"] = scores.miou
    final_accs = [k.final_semantic_acc for k in report.keyframes
                  if k.final_semantic_acc is not None]
    if final_accs:
        m["mean_kf_label_acc_pct"] = 100.0 * float(np.mean(final_accs))
    report.metrics.update(m)
