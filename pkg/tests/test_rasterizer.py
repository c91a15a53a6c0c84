import numpy as np
import pytest

from conftest import clean_random_scene, random_map, random_pose, small_camera
from splatfield.errors import DimensionError
from splatfield.rasterizer import (ALLOC_COUNTERS, COV2D_FLOOR, CameraIntrinsics,
                                   Pose, RenderFlags, apply_pose_delta, project,
                                   render, render_backward, render_reference,
                                   skew, so3_exp)
from splatfield.scene import Gaussian, GaussianMap


def single_gaussian_map(position, log_scale=-2.0, opacity_logit=8.0,
                        color=(1.0, 0.0, 0.0), nfeat=2, feature=None):
    m = GaussianMap(feature_dim=nfeat)
    g = Gaussian(np.array(position, float), np.array([1.0, 0, 0, 0]),
                 np.full(3, float(log_scale)), float(opacity_logit),
                 np.array(color, float),
                 np.zeros(nfeat) if feature is None else np.array(feature, float))
    m.append([g])
    return m


class TestProject:
    def test_on_axis_point(self):
        m = single_gaussian_map([0, 0, 2.0])
        intr = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)
        p = project(m.gaussian(0), Pose.identity(), intr)
        assert np.allclose(p.mean2d, [50, 50], atol=1e-12)
        assert p.depth == pytest.approx(2.0)
        assert p.in_frustum

    def test_tiny_splat_hits_lowpass_floor(self):
        m = single_gaussian_map([0, 0, 2.0], log_scale=-6.0)
        intr = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)
        p = project(m.gaussian(0), Pose.identity(), intr)
        assert p.cov2d[0, 0] == pytest.approx(COV2D_FLOOR, rel=0.1)
        assert p.cov2d[1, 1] == pytest.approx(COV2D_FLOOR, rel=0.1)
        ev = np.linalg.eigvalsh(p.cov2d)
        assert ev.min() >= COV2D_FLOOR * 0.99

    def test_out_of_frustum_behind_camera(self):
        m = single_gaussian_map([0, 0, -1.0])
        p = project(m.gaussian(0), Pose.identity(), small_camera())
        assert not p.in_frustum

    def test_monte_carlo_covariance_propagation(self):
        # EWA cov2d (incl. floor) vs the sample covariance of 1e5 world-space
        # draws pushed through the exact perspective projection
        rng = np.random.default_rng(0)
        intr = small_camera(size=64, fx=80.0, fy=80.0)
        for trial in range(5):
            m = random_map(rng, n=1, z_range=(1.8, 2.4), spread=0.25,
                           scale_range=(0.08, 0.16))
            pose = random_pose(rng, rot_scale=0.03, trans_scale=0.01)
            g = m.gaussian(0)
            p = project(g, pose, intr)
            from splatfield.scene import covariance
            cov_w = covariance(g)
            samples = rng.multivariate_normal(g.position, cov_w, size=100_000)
            cam = samples @ pose.rotation.T + pose.translation
            u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
            v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
            emp = np.cov(np.stack([u, v]), bias=True) + COV2D_FLOOR * np.eye(2)
            rel = np.abs(p.cov2d - emp).max() / np.abs(emp).max()
            assert rel < 0.05, f"trial {trial}: {rel}"


class TestRenderForward:
    def test_single_opaque_splat_center(self):
        # principal point on an exact pixel center so the falloff peak is 1
        intr = CameraIntrinsics(fx=60, fy=60, cx=15.0, cy=15.0, width=32, height=32)
        m = single_gaussian_map([0, 0, 2.0], log_scale=np.log(0.15),
                                opacity_logit=20.0, color=(1.0, 0.0, 0.0))
        out = render(m, Pose.identity(), intr, RenderFlags())
        cy, cx = 15, 15
        # per-pixel opacity is ceiling-clamped at 0.99
        assert out.color_image[cy, cx, 0] == pytest.approx(0.99, abs=1e-6)
        assert out.color_image[cy, cx, 1:].max() == 0.0
        assert out.depth_image[cy, cx] == pytest.approx(0.99 * 2.0, abs=1e-6)
        assert out.alpha_image[cy, cx] == pytest.approx(0.99, abs=1e-6)

    def test_two_coincident_splats_closed_form(self):
        intr = CameraIntrinsics(fx=60, fy=60, cx=15.0, cy=15.0, width=31, height=31)
        m = GaussianMap(feature_dim=1)
        # front: alpha 0.5, gray value 1; back: alpha ~1 (clamped 0.99), value 0
        m.append([
            Gaussian([0, 0, 2.0], [1, 0, 0, 0], np.full(3, np.log(0.3)), 0.0,
                     [1.0, 1.0, 1.0], [0.0]),
            Gaussian([0, 0, 2.0 + 1e-6], [1, 0, 0, 0], np.full(3, np.log(0.3)), 30.0,
                     [0.0, 0.0, 0.0], [0.0]),
        ])
        out = render(m, Pose.identity(), intr, RenderFlags())
        # center pixel: 0.5 * 1.0 + 0.5 * 0.99 * 0.0 = 0.5
        assert out.color_image[15, 15, 0] == pytest.approx(0.5, abs=1e-6)

    def test_matches_reference_compositor(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            m = random_map(rng, n=50, nfeat=4, alpha_max_logit=2.0)
            pose = random_pose(rng)
            intr = small_camera(size=64)
            flags = RenderFlags(render_features=True, record_visibility=True)
            a = render(m, pose, intr, flags)
            b = render_reference(m, pose, intr, flags)
            assert np.abs(a.color_image - b.color_image).max() <= 1e-5
            assert np.abs(a.depth_image - b.depth_image).max() <= 1e-5
            assert np.abs(a.alpha_image - b.alpha_image).max() <= 1e-5
            assert np.abs(a.feature_image - b.feature_image).max() <= 1e-5
            assert np.array_equal(a.visibility.bits, b.visibility.bits)

    def test_input_order_permutation_invariance(self):
        rng = np.random.default_rng(3)
        m = random_map(rng, n=20, nfeat=2, alpha_max_logit=2.0)
        pose = random_pose(rng)
        intr = small_camera()
        a = render(m, pose, intr, RenderFlags(render_features=True))
        perm = rng.permutation(20)
        m2 = GaussianMap(feature_dim=2)
        m2.append_arrays(m.positions[perm], m.rotations[perm], m.log_scales[perm],
                         m.opacity_logits[perm], m.colors[perm], m.features[perm])
        b = render(m2, pose, intr, RenderFlags(render_features=True))
        assert np.abs(a.color_image - b.color_image).max() <= 1e-6
        assert np.abs(a.depth_image - b.depth_image).max() <= 1e-6
        assert np.abs(a.alpha_image - b.alpha_image).max() <= 1e-6

    def test_alpha_and_depth_ranges(self):
        rng = np.random.default_rng(4)
        m = random_map(rng, n=30, alpha_max_logit=2.0)
        out = render(m, random_pose(rng), small_camera(), RenderFlags())
        assert out.alpha_image.min() >= 0.0 and out.alpha_image.max() <= 1.0
        covered = out.alpha_image > 0
        assert (out.depth_image[covered] >= 0).all()

    def test_features_off_bitwise_identical_elsewhere(self):
        rng = np.random.default_rng(5)
        m = random_map(rng, n=15, nfeat=3)
        pose = random_pose(rng)
        intr = small_camera()
        a = render(m, pose, intr, RenderFlags(render_features=False))
        b = render(m, pose, intr, RenderFlags(render_features=True))
        assert a.feature_image is None and b.feature_image is not None
        assert np.array_equal(a.color_image, b.color_image)
        assert np.array_equal(a.depth_image, b.depth_image)
        assert np.array_equal(a.alpha_image, b.alpha_image)

    def test_feature_buffers_not_allocated_when_disabled(self):
        rng = np.random.default_rng(6)
        m = random_map(rng, n=5, nfeat=3)
        pose = random_pose(rng)
        intr = small_camera()
        before = ALLOC_COUNTERS["feature_buffers"]
        out = render(m, pose, intr, RenderFlags(render_features=False))
        render_backward(m, pose, intr, RenderFlags(), out,
                        dL_dcolor=np.zeros((32, 32, 3)))
        assert ALLOC_COUNTERS["feature_buffers"] == before

    def test_empty_map_renders_blank(self):
        m = GaussianMap(feature_dim=1)
        out = render(m, Pose.identity(), small_camera(),
                     RenderFlags(record_visibility=True))
        assert out.color_image.max() == 0.0
        assert out.visibility.bits.size == 0


class TestVisibility:
    def test_occluded_gaussian_not_visible(self):
        intr = CameraIntrinsics(fx=60, fy=60, cx=15.5, cy=15.5, width=32, height=32)
        m = GaussianMap(feature_dim=1)
        m.append([
            Gaussian([0, 0, 1.5], [1, 0, 0, 0], np.full(3, np.log(0.5)), 30.0,
                     [1, 1, 1], [0.0]),   # big opaque front splat
            Gaussian([0, 0, 3.0], [1, 0, 0, 0], np.full(3, np.log(0.05)), 30.0,
                     [1, 0, 0], [0.0]),   # small splat fully behind it
        ])
        out = render(m, Pose.identity(), intr, RenderFlags(record_visibility=True))
        assert out.visibility.bits[0]
        assert not out.visibility.bits[1]


class TestApplyPoseDelta:
    def test_zero_delta_identity(self):
        pose = random_pose(np.random.default_rng(0))
        out = apply_pose_delta(pose, np.zeros(6))
        assert out is pose

    def test_pure_translation(self):
        out = apply_pose_delta(Pose.identity(), np.array([0.1, 0, 0, 0, 0, 0]))
        assert np.allclose(out.translation, [0.1, 0, 0], atol=1e-15)
        assert np.allclose(out.rotation, np.eye(3), atol=1e-15)

    def test_matches_matrix_exponential_oracle(self):
        def expm_scaling_squaring(A, n_squarings=12, taylor_terms=18):
            As = A / (2.0 ** n_squarings)
            X = np.eye(4)
            term = np.eye(4)
            for k in range(1, taylor_terms):
                term = term @ As / k
                X = X + term
            for _ in range(n_squarings):
                X = X @ X
            return X

        rng = np.random.default_rng(1)
        for _ in range(20):
            pose = random_pose(rng, rot_scale=0.4, trans_scale=0.3)
            delta = rng.normal(size=6) * 0.5
            out = apply_pose_delta(pose, delta)
            twist = np.zeros((4, 4))
            twist[:3, :3] = skew(delta[3:])
            twist[:3, 3] = delta[:3]
            expected = expm_scaling_squaring(twist) @ pose.matrix()
            assert np.abs(out.matrix() - expected).max() < 1e-9

    def test_result_orthonormal(self):
        rng = np.random.default_rng(2)
        pose = Pose.identity()
        for _ in range(200):
            pose = apply_pose_delta(pose, rng.normal(size=6) * 0.1)
        err = np.abs(pose.rotation @ pose.rotation.T - np.eye(3)).max()
        assert err < 1e-12

    def test_compose_inverse_identity(self):
        pose = random_pose(np.random.default_rng(3), rot_scale=0.5, trans_scale=1.0)
        ident = pose.compose(pose.inverse())
        assert np.abs(ident.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(ident.translation).max() < 1e-9


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        m = random_map(rng, n=8, nfeat=3)
        pose = random_pose(rng)
        intr = small_camera()
        out = render(m, pose, intr, RenderFlags())
        g, pg = render_backward(m, pose, intr, RenderFlags(), out,
                                dL_dcolor=np.zeros((32, 32, 3)),
                                dL_ddepth=np.zeros((32, 32)),
                                want_pose_grad=True)
        for arr in (g.position, g.rotation, g.log_scale, g.opacity_logit, g.color, pg):
            assert np.all(arr == 0.0)

    def test_feature_isolation_exact_zeros(self):
        rng = np.random.default_rng(1)
        m = random_map(rng, n=8, nfeat=3)
        pose = random_pose(rng)
        intr = small_camera()
        flags = RenderFlags(render_features=True)
        out = render(m, pose, intr, flags)
        g, pg = render_backward(m, pose, intr, flags, out,
                                dL_dcolor=np.zeros((32, 32, 3)),
                                dL_ddepth=np.zeros((32, 32)),
                                dL_dfeature=rng.normal(size=(32, 32, 3)),
                                want_pose_grad=True)
        assert np.all(g.position == 0.0)
        assert np.all(g.rotation == 0.0)
        assert np.all(g.log_scale == 0.0)
        assert np.all(g.opacity_logit == 0.0)
        assert np.all(g.color == 0.0)
        assert np.all(pg == 0.0)
        assert np.any(g.feature != 0.0)

    def test_shape_validation(self):
        rng = np.random.default_rng(2)
        m = random_map(rng, n=3, nfeat=2)
        pose = random_pose(rng)
        intr = small_camera()
        out = render(m, pose, intr, RenderFlags())
        with pytest.raises(DimensionError):
            render_backward(m, pose, intr, RenderFlags(), out,
                            dL_dcolor=np.zeros((16, 16, 3)))
        with pytest.raises(DimensionError):
            render_backward(m, pose, intr, RenderFlags(), out,
                            dL_dfeature=np.zeros((32, 32, 2)))

    def test_gradients_match_finite_differences(self):
        # condensed version of the acceptance gradient check (3 seeds here)
        from test_acceptance import gradient_check_scene
        for seed in range(3):
            fails = gradient_check_scene(seed)
            assert not fails, f"seed {seed}: {fails[:5]}"
