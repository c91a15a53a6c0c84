"""Run artifacts: metric report files (key=value and JSON), trajectory/map
exports, per-keyframe renders, and matplotlib figures saved alongside them."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import dataio
from .rasterizer import RenderFlags, render


def write_metrics_files(metrics: dict, out_dir):
    """metrics.txt with one `key=value` line per metric, plus metrics.json."""
    os.makedirs(out_dir, exist_ok=True)
    keys = sorted(metrics)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        for k in keys:
            v = metrics[k]
            fh.write(f"{k}={v:.9g}\n" if isinstance(v, float) else f"{k}={v}\n")
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump({k: metrics[k] for k in keys}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fig_trajectory(report, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    est = np.array([p.camera_center() for _, p in report.trajectory])
    ax.plot(est[:, 0], est[:, 2], "-", color="tab:blue", label="estimated")
    if report.gt_trajectory:
        gt = np.array([p.camera_center() for _, p in report.gt_trajectory])
        ax.plot(gt[:, 0], gt[:, 2], "--", color="black", label="ground truth")
    kf_ids = {k.frame_id for k in report.keyframes}
    kf = np.array([p.camera_center() for (ts, p), f in zip(report.trajectory, report.frames)
                   if f.frame_id in kf_ids])
    if len(kf):
        ax.plot(kf[:, 0], kf[:, 2], "o", ms=4, color="tab:red", label="keyframes")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ate = report.metrics.get("ate_rmse_cm")
    ax.set_title("trajectory" + (f" (ATE RMSE {ate:.3f} cm)" if ate is not None else ""))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _fig_keyframe_quality(report, path):
    kf = [k for k in report.keyframes if k.psnr_db is not None]
    if not kf:
        return
    fig, ax1 = plt.subplots(figsize=(6, 3.2))
    ids = [k.frame_id for k in kf]
    ax1.plot(ids, [k.psnr_db for k in kf], "o-", color="tab:blue", label="PSNR")
    ax1.set_xlabel("keyframe id")
    ax1.set_ylabel("PSNR [dB]", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(ids, [k.ssim for k in kf], "s--", color="tab:orange", label="SSIM")
    ax2.set_ylabel("SSIM", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _fig_map_growth(report, path):
    if not report.keyframes:
        return
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.step([k.frame_id for k in report.keyframes],
            [k.n_gaussians for k in report.keyframes], where="post")
    ax.set_xlabel("keyframe id")
    ax.set_ylabel("gaussians in map")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _fig_semantic_acc(report, path):
    kf = [k for k in report.keyframes if k.final_semantic_acc is not None]
    if not kf:
        return
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ids = [k.frame_id for k in kf]
    ax.plot(ids, [100 * k.post_semantic_acc for k in kf], "o-", label="right after optimization")
    ax.plot(ids, [100 * k.final_semantic_acc for k in kf], "s--", label="re-rendered at end")
    ax.set_xlabel("keyframe id")
    ax.set_ylabel("label accuracy [%]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_run_report(report, out_dir):
    """Write every run artifact: trajectories, map, metrics, figures, renders."""
    os.makedirs(out_dir, exist_ok=True)
    dataio.export_trajectory(report.trajectory, os.path.join(out_dir, "trajectory.txt"))
    if report.gt_trajectory:
        dataio.export_trajectory(report.gt_trajectory, os.path.join(out_dir, "gt_trajectory.txt"))
    report.gmap.save_text(os.path.join(out_dir, "map.txt"))
    write_metrics_files(report.metrics, out_dir)

    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    _fig_trajectory(report, os.path.join(fig_dir, "trajectory_topdown.png"))
    _fig_keyframe_quality(report, os.path.join(fig_dir, "keyframe_quality.png"))
    _fig_map_growth(report, os.path.join(fig_dir, "map_growth.png"))
    _fig_semantic_acc(report, os.path.join(fig_dir, "semantic_accuracy.png"))

    kf_dir = os.path.join(out_dir, "keyframes")
    os.makedirs(kf_dir, exist_ok=True)
    est_pose_by_id = {f.frame_id: p for f, (_, p) in zip(report.frames, report.trajectory)}
    for info in report.keyframes:
        pose = est_pose_by_id[info.frame_id]
        out = render(report.gmap, pose, report.intrinsics, RenderFlags())
        dataio.save_color_png(os.path.join(kf_dir, f"kf_{info.frame_id:04d}.png"),
                              out.color_image)
        dataio.save_depth_png(os.path.join(kf_dir, f"kf_{info.frame_id:04d}_depth.png"),
                              out.depth_image, scale=1000.0)
