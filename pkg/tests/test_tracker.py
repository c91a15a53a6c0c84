import numpy as np
import pytest

from conftest import random_map, random_pose, small_camera
from splatfield.dataio import Frame, SyntheticSceneSpec, generate_synthetic
from splatfield.errors import TrackingError
from splatfield.rasterizer import Pose, RenderFlags, render
from splatfield.scene import GaussianMap
from splatfield.tracker import TrackingConfig, edge_mask, track_frame, tracking_loss


def frame_from_render(gmap, pose, intr, frame_id=0):
    """Exact float frame with sensor (surface) depth semantics."""
    out = render(gmap, pose, intr, RenderFlags())
    covered = out.alpha_image >= 0.5
    depth = np.where(covered, out.depth_image / np.maximum(out.alpha_image, 1e-6), 0.0)
    return Frame(frame_id=frame_id, timestamp=0.0,
                 rgb=out.color_image.copy(), depth=depth)


class TestEdgeMask:
    def test_constant_image_keeps_all(self):
        img = np.full((20, 20, 3), 0.5)
        assert edge_mask(img).all()

    def test_vertical_step_edge_band(self):
        # keep fraction below the band fraction, so the quantile threshold is
        # positive and flat regions fall out
        img = np.zeros((24, 24, 3))
        img[:, 12:] = 1.0
        m = edge_mask(img, keep_fraction=0.05)
        assert m[:, 11:13].all()
        assert not m[:, :8].any()
        assert not m[:, 16:].any()

    def test_kept_fraction_near_quantile(self):
        rng = np.random.default_rng(0)
        # smooth "natural" image: low-pass filtered noise, continuous magnitudes
        img = rng.uniform(size=(130, 130))
        k = np.ones(5) / 5
        for ax in (0, 1):
            img = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), ax, img)
        rgb = np.stack([img] * 3, axis=-1)
        frac = edge_mask(rgb, keep_fraction=0.6).mean()
        assert abs(frac - 0.6) <= 0.02


class TestTrackingLoss:
    def test_perfect_render_zero_loss(self):
        rng = np.random.default_rng(1)
        m = random_map(rng, n=12, alpha_max_logit=3.0)
        pose = random_pose(rng)
        intr = small_camera()
        out = render(m, pose, intr, RenderFlags())
        frame = frame_from_render(m, pose, intr)
        loss, d_c, d_d = tracking_loss(out, frame, np.ones(out.depth_image.shape, bool), 0.9)
        assert loss == 0.0
        assert np.all(d_c == 0.0) and np.all(d_d == 0.0)

    def test_uniform_color_error_closed_form(self):
        H = W = 16
        rendered = type("O", (), {})()
        rendered.color_image = np.full((H, W, 3), 0.6)
        rendered.depth_image = np.full((H, W), 2.0)
        rendered.alpha_image = np.ones((H, W))
        frame = Frame(0, 0.0, np.full((H, W, 3), 0.5), np.full((H, W), 2.0))
        loss, _, _ = tracking_loss(rendered, frame, np.ones((H, W), bool), 0.9)
        # per-pixel channel-summed L1 = 0.3; lambda_t * 0.3 = 0.27
        assert loss == pytest.approx(0.27, abs=1e-12)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        H = W = 12
        rendered = type("O", (), {})()
        rendered.color_image = rng.uniform(size=(H, W, 3))
        rendered.depth_image = rng.uniform(0.5, 3.0, size=(H, W))
        rendered.alpha_image = rng.uniform(size=(H, W))
        frame = Frame(0, 0.0, rng.uniform(size=(H, W, 3)), rng.uniform(0, 3, (H, W)))
        m_e = rng.uniform(size=(H, W)) > 0.4
        lam = 0.7
        loss, _, _ = tracking_loss(rendered, frame, m_e, lam)

        m_v = rendered.alpha_image > 0.95
        lc = n_c = ld = n_d = 0.0
        for i in range(H):
            for j in range(W):
                if m_v[i, j] and m_e[i, j]:
                    n_c += 1
                    for ch in range(3):
                        lc += abs(rendered.color_image[i, j, ch] - frame.rgb[i, j, ch])
                if m_v[i, j] and frame.depth[i, j] > 0:
                    n_d += 1
                    ld += abs(rendered.depth_image[i, j]
                              - rendered.alpha_image[i, j] * frame.depth[i, j])
        expected = lam * (lc / n_c if n_c else 0.0) + (1 - lam) * (ld / n_d if n_d else 0.0)
        assert loss == pytest.approx(expected, abs=1e-10)


def tracking_scene(seed=0):
    spec = SyntheticSceneSpec(seed=seed, n_frames=3, n_gaussians=300, width=48,
                              height=48, fx=44.0, fy=44.0, orbit_degrees=2.0)
    gt_map, frames, _ = generate_synthetic(spec)
    return gt_map, frames, spec.intrinsics()


class TestTrackFrame:
    def test_fixed_point(self):
        # an exact (unquantized) render of the map is a strict fixed point
        gt_map, frames, intr = tracking_scene()
        pose = frames[0].gt_pose
        f = frame_from_render(gt_map, pose, intr)
        res = track_frame(gt_map, f, pose.copy(), intr, TrackingConfig())
        assert res.converged
        assert res.iterations_used <= 5
        assert np.abs(res.pose.matrix() - pose.matrix()).max() < 1e-5
        assert res.final_loss <= 1e-9

    def test_recovers_one_cm_perturbation(self):
        gt_map, frames, intr = tracking_scene()
        f = frames[1]
        start = Pose(f.gt_pose.rotation.copy(),
                     f.gt_pose.translation + np.array([0.01, 0.0, 0.0]))
        res = track_frame(gt_map, f, start, intr, TrackingConfig())
        err = np.linalg.norm(res.pose.camera_center() - f.gt_pose.camera_center())
        assert err < 1e-3

    def test_wild_init_fails_gracefully(self):
        gt_map, frames, intr = tracking_scene()
        f = frames[0]
        flipped = Pose(f.gt_pose.rotation @ np.diag([-1.0, 1.0, -1.0]),
                       f.gt_pose.translation + np.array([0.0, 0.0, 4.0]))
        res = track_frame(gt_map, f, flipped, intr,
                          TrackingConfig(max_iterations=40))
        assert np.isfinite(res.final_loss)
        assert res.iterations_used <= 40
        assert res.visibility is not None

    def test_never_mutates_map(self):
        gt_map, frames, intr = tracking_scene()
        h = gt_map.content_hash()
        f = frames[1]
        start = Pose(f.gt_pose.rotation.copy(),
                     f.gt_pose.translation + np.array([0.005, 0, 0]))
        track_frame(gt_map, f, start, intr, TrackingConfig(max_iterations=30))
        assert gt_map.content_hash() == h

    def test_deterministic(self):
        gt_map, frames, intr = tracking_scene()
        f = frames[1]
        start = Pose(f.gt_pose.rotation.copy(),
                     f.gt_pose.translation + np.array([0.008, 0, 0]))
        r1 = track_frame(gt_map, f, start.copy(), intr, TrackingConfig(max_iterations=50))
        r2 = track_frame(gt_map, f, start.copy(), intr, TrackingConfig(max_iterations=50))
        assert np.array_equal(r1.pose.matrix(), r2.pose.matrix())
        assert r1.iterations_used == r2.iterations_used
        assert r1.final_loss == r2.final_loss

    def test_empty_map_rejected(self):
        _, frames, intr = tracking_scene()
        with pytest.raises(TrackingError):
            track_frame(GaussianMap(1), frames[0], Pose.identity(), intr)

    def test_iterations_within_budget(self):
        gt_map, frames, intr = tracking_scene()
        cfg = TrackingConfig(max_iterations=7)
        f = frames[1]
        start = Pose(f.gt_pose.rotation.copy(),
                     f.gt_pose.translation + np.array([0.02, 0, 0]))
        res = track_frame(gt_map, f, start, intr, cfg)
        assert res.iterations_used <= 7
