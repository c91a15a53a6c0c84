"""Shared scene builders for the test suite."""

import numpy as np
import pytest

from splatfield.rasterizer import (ALPHA_CLAMP, T_STOP, CameraIntrinsics, Pose,
                                   RenderFlags, _Projection, render, so3_exp)
from splatfield.scene import GaussianMap


def random_map(rng, n=10, nfeat=4, alpha_max_logit=0.0,
               z_range=(1.6, 2.8), spread=0.45, scale_range=(0.04, 0.11)):
    """A bounded-opacity random map.

    alpha_max_logit <= 0 keeps activated opacity <= 0.5, so stacked
    transmittance can never cross the compositing stop threshold under
    finite-difference probes.
    """
    m = GaussianMap(feature_dim=nfeat)
    pos = rng.uniform([-spread, -spread, z_range[0]],
                      [spread, spread, z_range[1]], size=(n, 3))
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    ls = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), size=(n, 3))
    ol = rng.uniform(-2.3, alpha_max_logit, size=n)
    col = rng.uniform(0.05, 0.95, size=(n, 3))
    feat = rng.normal(size=(n, nfeat))
    m.append_arrays(pos, quat, ls, ol, col, feat)
    return m


def small_camera(size=32, fx=40.0, fy=42.0):
    return CameraIntrinsics(fx=fx, fy=fy, cx=(size - 1) / 2, cy=(size - 1) / 2,
                            width=size, height=size, z_near=0.05, z_far=20.0)


def random_pose(rng, rot_scale=0.05, trans_scale=0.02):
    return Pose(so3_exp(rng.normal(size=3) * rot_scale), rng.normal(size=3) * trans_scale)


def fd_clean(gmap, pose, intr, h=1e-4):
    """True when the scene sits safely away from every non-differentiable
    boundary a finite-difference probe could cross: compositing stop,
    opacity clamp, frustum margin, depth-sort ties, and the J view-ray clamp.
    """
    proj = _Projection(gmap, pose, intr)
    if not proj.in_frustum.all():
        return False
    # frustum margin (pixels); FD moves mean2d by ~h * fx/z
    m = 3.0 * np.sqrt(np.maximum(proj.cov2d[:, (0, 1), (0, 1)], 0.0))
    lo = proj.mean2d + m
    hi_x = intr.width - 1 + m[:, 0] - proj.mean2d[:, 0]
    hi_y = intr.height - 1 + m[:, 1] - proj.mean2d[:, 1]
    if min(lo.min(), hi_x.min(), hi_y.min()) < 0.1:
        return False
    # depth-sort ties
    d = np.sort(proj.depth)
    if d.size > 1 and np.diff(d).min() < 1e-3:
        return False
    # view-ray clamp proximity (J linearization switches branch there)
    tlx = 1.3 * 0.5 * intr.width / intr.fx
    tly = 1.3 * 0.5 * intr.height / intr.fy
    zs = np.where(np.abs(proj.depth) < 1e-12, 1e-12, proj.depth)
    if (np.abs(np.abs(proj.mu_c[:, 0] / zs) - tlx).min() < 1e-3
            or np.abs(np.abs(proj.mu_c[:, 1] / zs) - tly).min() < 1e-3):
        return False
    # transmittance stop and opacity clamp margins, from actual tile buffers
    out = render(gmap, pose, intr, RenderFlags())
    for rec in out.per_pixel_contrib:
        if rec.t_excl.min() < 2.0 * T_STOP:
            return False
        if rec.alpha_hat.max() > ALPHA_CLAMP - 0.005:
            return False
    return True


def clean_random_scene(seed, n=10, nfeat=4, size=32, max_tries=20):
    """Deterministically re-roll sub-seeds until the scene passes fd_clean."""
    intr = small_camera(size)
    for t in range(max_tries):
        rng = np.random.default_rng(seed * 1000 + t)
        m = random_map(rng, n=n, nfeat=nfeat)
        pose = random_pose(rng)
        if fd_clean(m, pose, intr):
            return m, pose, intr
    raise AssertionError(f"no fd-clean scene found for seed {seed}")
