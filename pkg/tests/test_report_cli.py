import json
import os

import numpy as np
import pytest

from splatfield import cli, report
from splatfield.dataio import load_prior_features, load_trajectory
from splatfield.pipeline import PipelineConfig, run


@pytest.fixture(scope="module")
def tiny_report():
    cfg = PipelineConfig()
    cfg.seed = 1
    cfg.feature_dim = 8
    cfg.mapping.init_iterations = 100
    cfg.mapping.kf_iterations = 8
    cfg.mapping.tau_thresh = 0.9
    cfg.semantics.num_classes = 4
    spec = cfg.dataset.synthetic
    spec.seed = 1
    spec.n_frames = 6
    spec.n_gaussians = 150
    spec.num_classes = 4
    spec.width = 36
    spec.height = 36
    spec.fx = spec.fy = 32.0
    spec.orbit_degrees = 10.0
    return run(cfg)


class TestRunReportFiles:
    def test_all_artifacts_written(self, tiny_report, tmp_path):
        out = tmp_path / "run"
        report.write_run_report(tiny_report, out)
        assert (out / "trajectory.txt").exists()
        assert (out / "gt_trajectory.txt").exists()
        assert (out / "map.txt").exists()
        assert (out / "metrics.txt").exists()
        assert (out / "metrics.json").exists()
        assert (out / "figures" / "trajectory_topdown.png").exists()
        assert (out / "figures" / "keyframe_quality.png").exists()
        assert (out / "figures" / "map_growth.png").exists()
        kf0 = tiny_report.keyframes[0].frame_id
        assert (out / "keyframes" / f"kf_{kf0:04d}.png").exists()
        assert (out / "keyframes" / f"kf_{kf0:04d}_depth.png").exists()

    def test_metrics_formats_agree(self, tiny_report, tmp_path):
        out = tmp_path / "m"
        report.write_metrics_files(tiny_report.metrics, out)
        lines = (out / "metrics.txt").read_text().splitlines()
        kv = dict(line.split("=", 1) for line in lines)
        blob = json.loads((out / "metrics.json").read_text())
        assert set(kv) == set(blob)
        for k, v in blob.items():
            assert kv[k] == (f"{v:.9g}" if isinstance(v, float) else str(v))

    def test_trajectory_file_parses(self, tiny_report, tmp_path):
        out = tmp_path / "t"
        report.write_run_report(tiny_report, out)
        traj = load_trajectory(out / "trajectory.txt")
        assert len(traj) == len(tiny_report.frames)


class TestCli:
    def test_synth_run_eval_render_roundtrip(self, tmp_path):
        spec_file = tmp_path / "scene.txt"
        spec_file.write_text(
            "seed = 5\nn_gaussians = 150\nnum_classes = 4\nn_frames = 5\n"
            "width = 36\nheight = 36\nfx = 32\nfy = 32\norbit_degrees = 6\n")
        data_dir = tmp_path / "data"
        assert cli.main(["synth", "--spec", str(spec_file), "--out", str(data_dir)]) == 0
        assert (data_dir / "frame000000.png").exists()
        assert (data_dir / "traj.txt").exists()
        assert (data_dir / "gt_trajectory_tum.txt").exists()

        cfg_file = tmp_path / "run.txt"
        cfg_file.write_text(
            "feature_dim = 8\n"
            "dataset.kind = replica\n"
            f"dataset.root = {data_dir}\n"
            "dataset.fx = 32\ndataset.fy = 32\ndataset.cx = 17.5\ndataset.cy = 17.5\n"
            "mapping.init_iterations = 80\nmapping.kf_iterations = 6\n"
            "mapping.tau_thresh = 0.9\n"
            "semantics.num_classes = 4\n")
        out_dir = tmp_path / "out"
        assert cli.main(["run", "--config", str(cfg_file), "--out", str(out_dir),
                         "--single-thread"]) == 0
        assert (out_dir / "trajectory.txt").exists()
        assert (out_dir / "metrics.txt").exists()
        assert (out_dir / "figures" / "trajectory_topdown.png").exists()

        eval_dir = tmp_path / "eval"
        assert cli.main(["eval", "--traj", str(out_dir / "trajectory.txt"),
                         "--gt", str(data_dir / "gt_trajectory_tum.txt"),
                         "--out", str(eval_dir)]) == 0
        assert (eval_dir / "metrics.txt").exists()
        assert (eval_dir / "trajectory_eval.png").exists()

        img = tmp_path / "view.png"
        feats = tmp_path / "view.feat"
        assert cli.main(["render", "--map", str(out_dir / "map.txt"),
                         "--pose", "0 0 -1 0 0 0 1", "--out", str(img),
                         "--width", "48", "--height", "48", "--fx", "40", "--fy", "40",
                         "--features-out", str(feats)]) == 0
        assert img.exists()
        arr = load_prior_features(feats)
        assert arr.shape == (48, 48, 8)

    def test_eval_rejects_disjoint_timestamps(self, tmp_path, capsys):
        a = tmp_path / "a.txt"
        b = tmp_path / "b.txt"
        a.write_text("0.0 0 0 0 0 0 0 1\n1.0 1 0 0 0 0 0 1\n")
        b.write_text("100.0 0 0 0 0 0 0 1\n101.0 1 0 0 0 0 0 1\n")
        assert cli.main(["eval", "--traj", str(a), "--gt", str(b)]) == 1
