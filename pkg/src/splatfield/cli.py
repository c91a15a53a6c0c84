"""Command-line interface: run the SLAM pipeline, evaluate trajectories,
render a saved map, and generate synthetic datasets."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import dataio, metrics, report
from .pipeline import PipelineConfig, run
from .rasterizer import CameraIntrinsics, Pose, RenderFlags, render
from .scene import GaussianMap, quat_to_rotmat

log = logging.getLogger("splatfield")


def _cmd_run(args):
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.dataset.synthetic.seed = args.seed
    if args.single_thread:
        cfg.single_thread = True
    if args.dual_thread:
        cfg.single_thread = False
    if args.no_semantics:
        cfg.semantics_enabled = False
    cfg.output_dir = args.out
    rep = run(cfg)
    report.write_run_report(rep, args.out)
    for k in sorted(rep.metrics):
        v = rep.metrics[k]
        print(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}")
    return 0


def _associate(est, gt, tol=0.02):
    gt_ts = np.array([t for t, _ in gt])
    pairs = []
    for ts, pose in est:
        i = int(np.searchsorted(gt_ts, ts))
        best = min(max(i - 1, 0), len(gt_ts) - 1)
        if i < len(gt_ts) and abs(gt_ts[i] - ts) < abs(gt_ts[best] - ts):
            best = i
        if abs(gt_ts[best] - ts) <= tol:
            pairs.append((pose, gt[best][1]))
    return pairs


def _cmd_eval(args):
    est = dataio.load_trajectory(args.traj)
    gt = dataio.load_trajectory(args.gt)
    pairs = _associate(est, gt)
    if len(pairs) < 2:
        print("error: fewer than two timestamp associations", file=sys.stderr)
        return 1
    e = np.array([p.camera_center() for p, _ in pairs])
    g = np.array([q.camera_center() for _, q in pairs])
    ate = metrics.ate_rmse(e, g)
    print(f"compared_poses={len(pairs)}")
    print(f"ate_rmse_cm={ate:.9g}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.write_metrics_files({"ate_rmse_cm": ate, "compared_poses": len(pairs)},
                                   args.out)
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(e[:, 0], e[:, 2], "-", label="estimated")
        ax.plot(g[:, 0], g[:, 2], "--", color="black", label="ground truth")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal")
        ax.legend(fontsize=8)
        ax.set_title(f"ATE RMSE {ate:.3f} cm")
        fig.tight_layout()
        fig.savefig(os.path.join(args.out, "trajectory_eval.png"), dpi=110)
    return 0


def _cmd_render(args):
    gmap = GaussianMap.load_text(args.map)
    vals = [float(v) for v in args.pose.replace(",", " ").split()]
    if len(vals) != 7:
        print("error: --pose needs 'tx ty tz qx qy qz qw'", file=sys.stderr)
        return 1
    tx, ty, tz, qx, qy, qz, qw = vals
    R_wc = quat_to_rotmat(np.array([qw, qx, qy, qz]))
    pose = Pose(R_wc.T, -R_wc.T @ np.array([tx, ty, tz]))
    intr = CameraIntrinsics(fx=args.fx, fy=args.fy,
                            cx=args.cx if args.cx is not None else (args.width - 1) / 2,
                            cy=args.cy if args.cy is not None else (args.height - 1) / 2,
                            width=args.width, height=args.height)
    out = render(gmap, pose, intr, RenderFlags(render_features=args.features_out is not None))
    dataio.save_color_png(args.out, out.color_image)
    if args.depth_out:
        dataio.save_depth_png(args.depth_out, out.depth_image, scale=1000.0)
    if args.features_out:
        dataio.write_float_planar(args.features_out, out.feature_image)
    print(f"rendered {args.width}x{args.height} view of {len(gmap)} gaussians -> {args.out}")
    return 0


def _cmd_synth(args):
    spec = dataio.SyntheticSceneSpec()
    if args.spec:
        from .pipeline import _parse_flat_config
        for k, v in _parse_flat_config(args.spec).items():
            if not hasattr(spec, k):
                print(f"error: unknown synthetic spec key {k!r}", file=sys.stderr)
                return 1
            cur = getattr(spec, k)
            if isinstance(cur, tuple):
                setattr(spec, k, tuple(float(x) for x in v.replace(",", " ").split()))
            elif isinstance(cur, int):
                setattr(spec, k, int(v))
            elif isinstance(cur, float):
                setattr(spec, k, float(v))
            else:
                setattr(spec, k, v)
    gt_map, frames, _classes = dataio.generate_synthetic(spec)
    dataio.write_replica_like(args.out, frames, depth_scale=spec.depth_scale)
    gt_map.save_text(os.path.join(args.out, "gt_map.txt"))
    dataio.export_trajectory([(f.timestamp, f.gt_pose) for f in frames],
                             os.path.join(args.out, "gt_trajectory_tum.txt"))
    print(f"wrote {len(frames)} frames, {len(gt_map)} gaussians -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatfield",
                                description="Gaussian-splatting RGB-D SLAM with feature fields")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the SLAM pipeline")
    r.add_argument("--config", help="flat key=value config file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--single-thread", action="store_true",
                   help="force deterministic single-thread mode")
    r.add_argument("--dual-thread", action="store_true",
                   help="run tracking and mapping on separate threads")
    r.add_argument("--no-semantics", action="store_true", help="disable the feature field")
    r.add_argument("--seed", type=int, default=None)
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="absolute trajectory error between two TUM files")
    e.add_argument("--traj", required=True, help="estimated trajectory (TUM format)")
    e.add_argument("--gt", required=True, help="ground-truth trajectory (TUM format)")
    e.add_argument("--out", help="optional report directory")
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("render", help="render a saved map from a given camera")
    d.add_argument("--map", required=True, help="map export produced by a run")
    d.add_argument("--pose", required=True, help="camera-to-world 'tx ty tz qx qy qz qw'")
    d.add_argument("--out", required=True, help="output color PNG")
    d.add_argument("--depth-out", help="optional 16-bit depth PNG (millimeters)")
    d.add_argument("--features-out", help="optional raw planar float feature map")
    d.add_argument("--width", type=int, default=640)
    d.add_argument("--height", type=int, default=480)
    d.add_argument("--fx", type=float, default=525.0)
    d.add_argument("--fy", type=float, default=525.0)
    d.add_argument("--cx", type=float, default=None)
    d.add_argument("--cy", type=float, default=None)
    d.set_defaults(func=_cmd_render)

    s = sub.add_parser("synth", help="generate a synthetic Replica-like dataset")
    s.add_argument("--spec", help="flat key=value synthetic scene spec")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
