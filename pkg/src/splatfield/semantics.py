"""Decoupled optimization of per-Gaussian semantic embeddings.

Runs strictly after geometry/appearance mapping.  Ground-truth mode treats the
first C feature channels as class logits under cross-entropy; textual mode
matches a linear-head + bilinear-resize projection of the rendered feature map
against precomputed prior feature maps with L1.  Either way gradients reach
only the feature field (and the head), never geometry or poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .optimizer import AdamState, MapOptimizer, adam_step
from .rasterizer import CameraIntrinsics, Pose, RenderFlags, render, render_backward
from .scene import GaussianMap

IGNORE_LABEL = 255


@dataclass
class SemanticConfig:
    mode: str = "ground_truth"            # "ground_truth" | "textual"
    num_classes: int = 8
    prior_dim: int = 512
    init_iterations: int = 10
    kf_iterations: int | None = None      # defaults: 3 (ground_truth), 1 (textual)
    feature_lr: float = 0.01
    head_lr: float = 0.01
    head_height: int = 480
    head_width: int = 360

    def __post_init__(self):
        if self.mode not in ("ground_truth", "textual"):
            raise ConfigError(f"unknown semantic mode {self.mode!r}")
        if self.mode == "textual" and self.prior_dim < 1:
            raise ConfigError("textual mode requires prior_dim >= 1")
        if self.kf_iterations is None:
            self.kf_iterations = 3 if self.mode == "ground_truth" else 1


def semantic_loss_gt(feature_image: np.ndarray, labels: np.ndarray, num_classes: int):
    """Mean softmax cross-entropy over the first num_classes feature channels.

    Pixels labeled IGNORE_LABEL contribute neither loss nor gradient; channels
    beyond num_classes receive zero gradient.  Returns (loss, dL/dfeature_image).
    """
    H, W, N = feature_image.shape
    if num_classes > N:
        raise ConfigError(f"num_classes {num_classes} exceeds feature dim {N}")
    labels = np.asarray(labels)
    valid = labels != IGNORE_LABEL
    grad = np.zeros_like(feature_image)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, grad

    logits = feature_image[..., :num_classes]
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    softmax = e / e.sum(axis=-1, keepdims=True)
    lv = labels[valid].astype(np.int64)
    p_true = softmax[valid, lv]
    loss = float(-np.log(np.maximum(p_true, 1e-300)).sum() / n_valid)

    g = softmax.copy()
    g[valid, lv] -= 1.0
    g[~valid] = 0.0
    grad[..., :num_classes] = g / n_valid
    return loss, grad


def predict_labels(feature_image: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-pixel argmax over the first num_classes channels; ties pick the lowest index."""
    if num_classes > feature_image.shape[-1]:
        raise ConfigError(f"num_classes {num_classes} exceeds feature dim")
    return np.argmax(feature_image[..., :num_classes], axis=-1)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear resampling matrix (n_out, n_in), half-pixel-center convention.

    Exactly the identity when n_out == n_in.
    """
    R = np.zeros((n_out, n_in))
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    np.add.at(R, (np.arange(n_out), i0c), 1.0 - frac)
    np.add.at(R, (np.arange(n_out), i1c), frac)
    return R


@dataclass
class FeatureHead:
    """Per-pixel linear map (1x1 conv) + bilinear resize to the target size."""

    weight: np.ndarray            # (M, N)
    bias: np.ndarray              # (M,)
    target_hw: tuple = (480, 360)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ConfigError("feature head parameters must be finite")

    @classmethod
    def create(cls, prior_dim: int, feature_dim: int, target_hw=(480, 360),
               rng: np.random.Generator | None = None) -> "FeatureHead":
        rng = rng or np.random.default_rng(0)
        w = rng.normal(scale=1.0 / np.sqrt(feature_dim), size=(prior_dim, feature_dim))
        return cls(w, np.zeros(prior_dim), tuple(target_hw))


def apply_head(head: FeatureHead, feature_image: np.ndarray) -> np.ndarray:
    """weight @ f + bias per pixel, then bilinear resize to head.target_hw."""
    pre = feature_image @ head.weight.T + head.bias
    Hp, Wp = head.target_hw
    Ry = _interp_matrix(Hp, pre.shape[0])
    Rx = _interp_matrix(Wp, pre.shape[1])
    tmp = np.tensordot(Ry, pre, axes=(1, 0))          # (H', W, M)
    return np.tensordot(Rx, tmp, axes=(1, 1)).transpose(1, 0, 2)


def _apply_head_backward(head: FeatureHead, feature_image: np.ndarray, d_out: np.ndarray):
    """Adjoint of apply_head: gradients for the input features and head parameters."""
    Hp, Wp = head.target_hw
    Ry = _interp_matrix(Hp, feature_image.shape[0])
    Rx = _interp_matrix(Wp, feature_image.shape[1])
    tmp = np.tensordot(Ry.T, d_out, axes=(1, 0))      # (H, W', M)
    d_pre = np.tensordot(Rx.T, tmp, axes=(1, 1)).transpose(1, 0, 2)
    d_weight = np.einsum("hwm,hwn->mn", d_pre, feature_image)
    d_bias = d_pre.sum(axis=(0, 1))
    d_feat = d_pre @ head.weight
    return d_feat, d_weight, d_bias


def semantic_loss_textual(feature_image: np.ndarray, prior: np.ndarray, head: FeatureHead):
    """Mean elementwise L1 between the prior map and the head-projected render.

    Returns (loss, dL/dfeature_image, dL/dweight, dL/dbias).
    """
    out = apply_head(head, feature_image)
    if out.shape != prior.shape:
        raise DimensionError(f"prior shape {prior.shape} != head output {out.shape}")
    resid = out - prior
    loss = float(np.abs(resid).mean())
    d_out = np.sign(resid) / resid.size
    d_feat, d_w, d_b = _apply_head_backward(head, feature_image, d_out)
    return loss, d_feat, d_w, d_b


@dataclass
class TextQuerySet:
    """Unit-norm query embeddings, one per open-vocabulary label."""

    labels: list
    vectors: np.ndarray           # (L, M)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.labels) != self.vectors.shape[0]:
            raise DimensionError("one query vector per label required")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.size and np.abs(norms - 1.0).max() > 1e-6:
            raise ConfigError("query vectors must be unit-norm to 1e-6")


def label_probability(pixel_feature: np.ndarray, queries: TextQuerySet) -> np.ndarray:
    """Softmax over dot products with every query vector; sums to 1."""
    if len(queries.labels) == 0:
        raise ConfigError("empty query set")
    pixel_feature = np.asarray(pixel_feature, dtype=np.float64)
    if pixel_feature.shape[-1] != queries.vectors.shape[1]:
        raise DimensionError("feature dimension does not match query dimension")
    scores = pixel_feature @ queries.vectors.T
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def classify_with_queries(head_out: np.ndarray, queries: TextQuerySet) -> np.ndarray:
    """Per-pixel argmax of label_probability over a head-projected feature map."""
    return np.argmax(head_out @ queries.vectors.T, axis=-1)


class HeadOptimizer:
    """Adam state for the textual head parameters."""

    def __init__(self, head: FeatureHead, lr: float = 0.01):
        self.lr = lr
        self.w_state = AdamState.for_params(head.weight)
        self.b_state = AdamState.for_params(head.bias)

    def step(self, head: FeatureHead, d_weight: np.ndarray, d_bias: np.ndarray):
        adam_step(head.weight, d_weight, self.w_state, self.lr)
        adam_step(head.bias, d_bias, self.b_state, self.lr)


def optimize_semantics(gmap: GaussianMap, frame, pose: Pose, intr: CameraIntrinsics,
                       cfg: SemanticConfig, optimizer: MapOptimizer,
                       head: FeatureHead | None = None,
                       head_opt: HeadOptimizer | None = None,
                       is_initial: bool = False) -> list[float]:
    """Feature-field optimization for one keyframe, after its geometry mapping.

    Runs init_iterations (initial frame) or kf_iterations (subsequent
    keyframes) of render-with-features -> mode loss -> feature-only backward
    -> Adam on the features (and head in textual mode).  Geometry, appearance
    and the pose are untouched.  Returns the per-iteration losses.
    """
    iterations = cfg.init_iterations if is_initial else cfg.kf_iterations
    if cfg.mode == "ground_truth":
        if getattr(frame, "gt_label", None) is None:
            raise ConfigError("ground_truth semantic mode requires frames with gt_label")
        if cfg.num_classes > gmap.feature_dim:
            raise ConfigError("num_classes exceeds the map feature dimension")
    else:
        if head is None:
            raise ConfigError("textual semantic mode requires a FeatureHead")
        prior = frame.prior_features()
        if prior is None:
            raise ConfigError("textual semantic mode requires frames with prior features")

    flags = RenderFlags(render_features=True, record_visibility=False)
    losses = []
    for _ in range(iterations):
        out = render(gmap, pose, intr, flags)
        if cfg.mode == "ground_truth":
            loss, d_feat_img = semantic_loss_gt(out.feature_image, frame.gt_label,
                                                cfg.num_classes)
        else:
            loss, d_feat_img, d_w, d_b = semantic_loss_textual(out.feature_image, prior, head)
        grads, _ = render_backward(gmap, pose, intr, flags, out, dL_dfeature=d_feat_img)
        optimizer.step_features(gmap, grads.feature)
        if cfg.mode == "textual" and head_opt is not None:
            head_opt.step(head, d_w, d_b)
        losses.append(loss)
    return losses
