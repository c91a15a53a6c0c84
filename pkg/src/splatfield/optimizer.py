"""Adam with per-parameter-group learning rates and the exponential position schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .scene import GaussianMap


@dataclass
class AdamState:
    """First/second moments for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped_nonfinite: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64),
                   np.zeros_like(params, dtype=np.float64), **kw)

    def extend(self, shape_tail: tuple, n_new: int):
        """Zero-state moments for appended parameters (map growth)."""
        pad = np.zeros((n_new,) + shape_tail)
        self.first_moment = np.concatenate([self.first_moment, pad])
        self.second_moment = np.concatenate([self.second_moment, pad])


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """Standard bias-corrected Adam update, in place.

    Non-finite gradient entries are skipped scalar-wise (value and moments
    untouched) and counted in ``state.skipped_nonfinite``.

    Returns (params, state, step) where step is the applied update (new - old).
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise DimensionError(f"grad shape {grads.shape} != param shape {params.shape}")
    state.step_count += 1
    ok = np.isfinite(grads)
    n_bad = int(grads.size - np.count_nonzero(ok))
    if n_bad:
        state.skipped_nonfinite += n_bad
        grads = np.where(ok, grads, 0.0)
    m, v = state.first_moment, state.second_moment
    m_new = state.beta1 * m + (1 - state.beta1) * grads
    v_new = state.beta2 * v + (1 - state.beta2) * grads * grads
    np.copyto(m, m_new, where=ok)
    np.copyto(v, v_new, where=ok)
    m_hat = m / (1 - state.beta1 ** state.step_count)
    v_hat = v / (1 - state.beta2 ** state.step_count)
    step = -lr * m_hat / (np.sqrt(v_hat) + state.eps)
    step = np.where(ok, step, 0.0)
    params += step
    return params, state, step


@dataclass
class LrSchedule:
    """Log-linear decay lr_init -> lr_final over max_steps, clamped after.

    delay_mult damps the first delay_steps steps; with delay_steps = 0 it is
    inert, matching the default position schedule.
    """

    lr_init: float
    lr_final: float
    lr_delay_mult: float = 0.01
    max_steps: int = 30000
    delay_steps: int = 0

    def __post_init__(self):
        if not (0 < self.lr_final <= self.lr_init):
            raise DimensionError("require 0 < lr_final <= lr_init")
        if self.max_steps <= 0:
            raise DimensionError("max_steps must be positive")


def scheduled_lr(sched: LrSchedule, step: int) -> float:
    t = min(max(step / sched.max_steps, 0.0), 1.0)
    lr = float(np.exp(np.log(sched.lr_init) * (1 - t) + np.log(sched.lr_final) * t))
    if sched.delay_steps > 0:
        p = min(max(step / sched.delay_steps, 0.0), 1.0)
        lr *= sched.lr_delay_mult + (1 - sched.lr_delay_mult) * np.sin(0.5 * np.pi * p)
    return lr


# Appendix-table defaults for every learnable group.
DEFAULT_RATES = {
    "position_lr_init": 0.0008,
    "position_lr_final": 0.0000016,
    "position_lr_delay_mult": 0.01,
    "position_lr_max_steps": 30000,
    "color_lr": 0.0025,
    "opacity_lr": 0.05,
    "scaling_lr": 0.005,
    "rotation_lr": 0.001,
    "rotation_delta_lr": 0.003,
    "trans_delta_lr": 0.001,
    "feature_lr": 0.01,
}

MAP_GROUPS = ("position", "rotation", "log_scale", "opacity_logit", "color", "feature")


class MapOptimizer:
    """Adam over the six per-Gaussian parameter groups of a map.

    Position uses the exponential schedule; every other group has a fixed
    rate.  State grows with the map (fresh zero moments for new Gaussians).
    """

    def __init__(self, gmap: GaussianMap, rates: dict | None = None):
        r = dict(DEFAULT_RATES)
        if rates:
            r.update(rates)
        self.rates = r
        self.position_schedule = LrSchedule(
            r["position_lr_init"], r["position_lr_final"],
            r["position_lr_delay_mult"], int(r["position_lr_max_steps"]))
        self.states = {
            "position": AdamState.for_params(gmap.positions),
            "rotation": AdamState.for_params(gmap.rotations),
            "log_scale": AdamState.for_params(gmap.log_scales),
            "opacity_logit": AdamState.for_params(gmap.opacity_logits),
            "color": AdamState.for_params(gmap.colors),
            "feature": AdamState.for_params(gmap.features),
        }
        self._size = len(gmap)

    def sync_size(self, gmap: GaussianMap):
        """Extend moment arrays after the map grew."""
        n_new = len(gmap) - self._size
        if n_new < 0:
            raise DimensionError("map shrank; optimizer state cannot follow")
        if n_new:
            self.states["position"].extend((3,), n_new)
            self.states["rotation"].extend((4,), n_new)
            self.states["log_scale"].extend((3,), n_new)
            self.states["opacity_logit"].extend((), n_new)
            self.states["color"].extend((3,), n_new)
            self.states["feature"].extend((gmap.feature_dim,), n_new)
            self._size = len(gmap)

    def step_geometry(self, gmap: GaussianMap, grads) -> None:
        """One Adam step on all groups except the feature field."""
        self.sync_size(gmap)
        lr_pos = scheduled_lr(self.position_schedule, self.states["position"].step_count)
        adam_step(gmap.positions, grads.position, self.states["position"], lr_pos)
        adam_step(gmap.rotations, grads.rotation, self.states["rotation"], self.rates["rotation_lr"])
        adam_step(gmap.log_scales, grads.log_scale, self.states["log_scale"], self.rates["scaling_lr"])
        adam_step(gmap.opacity_logits, grads.opacity_logit, self.states["opacity_logit"],
                  self.rates["opacity_lr"])
        adam_step(gmap.colors, grads.color, self.states["color"], self.rates["color_lr"])
        gmap.normalize_rotations()

    def step_features(self, gmap: GaussianMap, feature_grads: np.ndarray) -> None:
        self.sync_size(gmap)
        adam_step(gmap.features, feature_grads, self.states["feature"], self.rates["feature_lr"])
