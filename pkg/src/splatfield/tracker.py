"""Per-frame camera pose estimation.

Minimizes the masked photometric + depth L1 loss over a 6-DoF pose delta with
Adam, Gaussian parameters frozen.  Convergence is declared when the norm of one
applied delta step drops under the configured threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, TrackingError
from .optimizer import AdamState, adam_step
from .rasterizer import (CameraIntrinsics, Pose, RenderFlags, RenderOutput,
                         apply_pose_delta, render, render_backward)
from .scene import GaussianMap, VisibilityRecord

# rendered-opacity threshold defining the visibility mask m_v
ALPHA_MASK_THRESHOLD = 0.95


@dataclass
class TrackingConfig:
    lambda_t: float = 0.9
    max_iterations: int = 200
    convergence_eps: float = 1e-4
    edge_keep_fraction: float = 0.6


@dataclass
class TrackingResult:
    pose: Pose
    iterations_used: int
    final_loss: float
    visibility: VisibilityRecord
    converged: bool


def edge_mask(rgb: np.ndarray, keep_fraction: float = 0.6) -> np.ndarray:
    """Binary mask of the strongest image gradients.

    Sobel magnitude on grayscale; pixels at or above the (1 - keep_fraction)
    quantile are kept.  A constant image has zero gradient everywhere, so the
    >= rule keeps all pixels.
    """
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    p = np.pad(gray, 1, mode="reflect")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:])
    mag = np.hypot(gx, gy)
    thresh = np.quantile(mag, 1.0 - keep_fraction)
    return mag >= thresh


def tracking_loss(rendered: RenderOutput, frame, m_e: np.ndarray, lambda_t: float):
    """Masked L1 color + depth loss and its image-space subgradients.

    Color is averaged over {m_v and m_e} with per-pixel channel-summed L1;
    depth over {m_v and frame-depth-valid}.  The sensor depth (a surface
    measurement) is weighted by the rendered coverage before the comparison,
    so a map with correct surfaces has zero residual at any opacity level;
    the coverage factor is treated as constant in the backward pass.  The
    subgradient of |.| at 0 is 0.

    Returns (loss, dL/dcolor (H,W,3), dL/ddepth (H,W)).
    """
    m_v = rendered.alpha_image > ALPHA_MASK_THRESHOLD
    m_c = m_v & m_e
    m_d = m_v & (frame.depth > 0)

    resid_c = rendered.color_image - frame.rgb
    n_c = int(m_c.sum())
    loss_c = float(np.abs(resid_c[m_c]).sum() / n_c) if n_c else 0.0
    d_color = np.zeros_like(resid_c)
    if n_c:
        d_color = lambda_t * np.sign(resid_c) * m_c[..., None] / n_c

    resid_d = rendered.depth_image - rendered.alpha_image * frame.depth
    n_d = int(m_d.sum())
    loss_d = float(np.abs(resid_d[m_d]).sum() / n_d) if n_d else 0.0
    d_depth = np.zeros_like(resid_d)
    if n_d:
        # deadband keeps ulp-level roundoff from producing +-1 subgradients
        sign_d = np.where(np.abs(resid_d) > 1e-12, np.sign(resid_d), 0.0)
        d_depth = (1.0 - lambda_t) * sign_d * m_d / n_d

    loss = lambda_t * loss_c + (1.0 - lambda_t) * loss_d
    return loss, d_color, d_depth


def track_frame(gmap: GaussianMap, frame, init_pose: Pose, intr: CameraIntrinsics,
                cfg: TrackingConfig = TrackingConfig(),
                trans_delta_lr: float = 0.001,
                rot_delta_lr: float = 0.003) -> TrackingResult:
    """Optimize the camera pose of one frame against a frozen map snapshot.

    Iterates render -> loss -> pose backward -> Adam step on the 6-DoF delta
    (translation/rotation groups with their own rates) -> exponential-map pose
    update, until the step norm falls under cfg.convergence_eps or the
    iteration budget runs out.  Visibility is recorded from the final render.
    """
    if len(gmap) == 0:
        raise TrackingError("cannot track against an empty map")
    m_e = edge_mask(frame.rgb, cfg.edge_keep_fraction)
    pose = init_pose.copy()
    st_t = AdamState.for_params(np.zeros(3))
    st_r = AdamState.for_params(np.zeros(3))
    flags = RenderFlags(render_features=False, record_visibility=False)

    converged = False
    iterations = 0
    for _ in range(cfg.max_iterations):
        out = render(gmap, pose, intr, flags)
        loss, d_color, d_depth = tracking_loss(out, frame, m_e, cfg.lambda_t)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite tracking loss at frame {frame.frame_id}")
        _, pose_grad = render_backward(gmap, pose, intr, flags, out,
                                       dL_dcolor=d_color, dL_ddepth=d_depth,
                                       want_pose_grad=True)
        dt = np.zeros(3)
        dr = np.zeros(3)
        _, _, step_t = adam_step(dt, pose_grad[:3], st_t, trans_delta_lr)
        _, _, step_r = adam_step(dr, pose_grad[3:], st_r, rot_delta_lr)
        step = np.concatenate([step_t, step_r])
        pose = apply_pose_delta(pose, step)
        iterations += 1
        if float(np.linalg.norm(step)) < cfg.convergence_eps:
            converged = True
            break

    final = render(gmap, pose, intr,
                   RenderFlags(render_features=False, record_visibility=True),
                   frame_id=frame.frame_id)
    final_loss, _, _ = tracking_loss(final, frame, m_e, cfg.lambda_t)
    if not np.isfinite(final_loss):
        raise NumericError(f"non-finite tracking loss at frame {frame.frame_id}")
    return TrackingResult(pose=pose, iterations_used=iterations,
                          final_loss=final_loss, visibility=final.visibility,
                          converged=converged)
