"""splatfield: CPU RGB-D SLAM on differentiable Gaussian splatting with semantic feature fields."""

from .scene import Gaussian, GaussianMap, VisibilityRecord, covariance
from .rasterizer import (CameraIntrinsics, Pose, RenderFlags, RenderOutput,
                         apply_pose_delta, project, render, render_backward,
                         render_reference)
from .dataio import Frame, SyntheticSceneSpec, generate_synthetic
from .pipeline import PipelineConfig, RunReport, run

__all__ = [
    "Gaussian", "GaussianMap", "VisibilityRecord", "covariance",
    "CameraIntrinsics", "Pose", "RenderFlags", "RenderOutput",
    "apply_pose_delta", "project", "render", "render_backward", "render_reference",
    "Frame", "SyntheticSceneSpec", "generate_synthetic",
    "PipelineConfig", "RunReport", "run",
]

__version__ = "0.1.0"
