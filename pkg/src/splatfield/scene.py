"""Map representation: Gaussian primitives, their activations, and visibility bookkeeping.

Internally the map is stored as struct-of-arrays (float64) so rendering and
optimization can run vectorized; the `Gaussian` dataclass is the per-primitive
view used at API boundaries.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError

MAP_MAGIC = "gsff-map v1"


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion(s) in (w, x, y, z) order.

    Accepts shape (4,) or (n, 4); the quaternion is normalized internally.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batch world-space covariances R diag(exp(2 ls)) R^T, shape (n, 3, 3)."""
    R = quat_to_rotmat(rotations)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


@dataclass
class Gaussian:
    """One scene primitive.

    position      world meters
    rotation      unit quaternion (w, x, y, z); renormalized after optimizer steps
    log_scale     pre-activation; activated scale s = exp(log_scale) > 0
    opacity_logit pre-activation; activated opacity sigmoid(.) in (0, 1)
    color         RGB in [0, 1]
    feature       semantic embedding, length = map feature_dim
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.feature = np.asarray(self.feature, dtype=np.float64).ravel()

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


def covariance(g: Gaussian) -> np.ndarray:
    """World-space covariance R S S^T R^T of a single Gaussian (symmetric PSD)."""
    return covariances(g.rotation[None], g.log_scale[None])[0]


@dataclass
class VisibilityRecord:
    """Which Gaussians were visible from one frame.

    bits[i] = 1 iff Gaussian i arrived with transmittance > 0.5 at at least one
    pixel where its falloff-weighted opacity reached 1/255.  map_version is the
    map size when the record was taken; records of different versions compare
    on their common prefix.
    """

    frame_id: int
    bits: np.ndarray
    map_version: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).ravel()
        if self.bits.shape[0] != self.map_version:
            raise DimensionError(
                f"visibility record length {self.bits.shape[0]} != map_version {self.map_version}"
            )


class GaussianMap:
    """Dynamic collection of Gaussians plus per-keyframe visibility records."""

    def __init__(self, feature_dim: int):
        if feature_dim < 1:
            raise DimensionError("feature_dim must be >= 1")
        self.feature_dim = int(feature_dim)
        self.positions = np.empty((0, 3))
        self.rotations = np.empty((0, 4))
        self.log_scales = np.empty((0, 3))
        self.opacity_logits = np.empty((0,))
        self.colors = np.empty((0, 3))
        self.features = np.empty((0, self.feature_dim))
        self.visibility_records: dict[int, VisibilityRecord] = {}

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def gaussian(self, i: int) -> Gaussian:
        """Per-primitive copy (mutating it does not touch the map)."""
        return Gaussian(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
            self.features[i].copy(),
        )

    def append(self, new) -> "GaussianMap":
        """Append Gaussians at the end; existing indices and values are untouched.

        Existing visibility records keep their map_version, so cross-version
        IoU comparisons run on the common prefix.
        """
        new = list(new)
        if not new:
            return self
        for g in new:
            if g.feature.shape[0] != self.feature_dim:
                raise DimensionError(
                    f"gaussian feature length {g.feature.shape[0]} != map feature_dim {self.feature_dim}"
                )
        self.append_arrays(
            np.stack([g.position for g in new]),
            np.stack([g.rotation for g in new]),
            np.stack([g.log_scale for g in new]),
            np.array([g.opacity_logit for g in new]),
            np.stack([g.color for g in new]),
            np.stack([g.feature for g in new]),
        )
        return self

    def append_arrays(self, positions, rotations, log_scales, opacity_logits, colors, features):
        """Bulk append; the fast path used by seeding."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise DimensionError(
                f"feature block shape {features.shape} incompatible with feature_dim {self.feature_dim}"
            )
        self.positions = np.vstack([self.positions, np.asarray(positions, dtype=np.float64)])
        self.rotations = np.vstack([self.rotations, np.asarray(rotations, dtype=np.float64)])
        self.log_scales = np.vstack([self.log_scales, np.asarray(log_scales, dtype=np.float64)])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).ravel()]
        )
        self.colors = np.vstack([self.colors, np.asarray(colors, dtype=np.float64)])
        self.features = np.vstack([self.features, features])

    def record_visibility(self, frame_id: int, bits: np.ndarray) -> VisibilityRecord:
        rec = VisibilityRecord(frame_id, bits, map_version=len(self))
        self.visibility_records[frame_id] = rec
        return rec

    def normalize_rotations(self):
        """Renormalize quaternions in place (run after every optimizer step)."""
        n = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, n, out=self.rotations, where=n > 0)

    def copy(self) -> "GaussianMap":
        m = GaussianMap(self.feature_dim)
        m.positions = self.positions.copy()
        m.rotations = self.rotations.copy()
        m.log_scales = self.log_scales.copy()
        m.opacity_logits = self.opacity_logits.copy()
        m.colors = self.colors.copy()
        m.features = self.features.copy()
        m.visibility_records = dict(self.visibility_records)
        return m

    def content_hash(self) -> str:
        """Hash of all parameter arrays; used by snapshot/atomicity tests."""
        h = hashlib.sha256()
        for a in (self.positions, self.rotations, self.log_scales,
                  self.opacity_logits, self.colors, self.features):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def save_text(self, path):
        """Plain-text export, one line per Gaussian with activated values.

        Header: ``gsff-map v1 count=<n> feature_dim=<N>``; each line holds
        ``x y z qw qx qy qz sx sy sz alpha r g b f_0 ... f_{N-1}`` at 9
        significant digits.
        """
        with open(path, "w") as fh:
            fh.write(f"{MAP_MAGIC} count={len(self)} feature_dim={self.feature_dim}\n")
            scales = self.scales
            alphas = self.opacities
            for i in range(len(self)):
                vals = np.concatenate([
                    self.positions[i], self.rotations[i], scales[i],
                    [alphas[i]], self.colors[i], self.features[i],
                ])
                fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")

    @classmethod
    def load_text(cls, path) -> "GaussianMap":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 4 or " ".join(header[:2]) != MAP_MAGIC:
                raise FormatError(f"{path}: bad map header")
            count = int(header[2].split("=")[1])
            feature_dim = int(header[3].split("=")[1])
            m = cls(feature_dim)
            rows = []
            for line in fh:
                if line.strip():
                    rows.append(np.array(line.split(), dtype=np.float64))
            if len(rows) != count:
                raise FormatError(f"{path}: expected {count} gaussians, found {len(rows)}")
            if count == 0:
                return m
            data = np.stack(rows)
            if data.shape[1] != 14 + feature_dim:
                raise FormatError(f"{path}: expected {14 + feature_dim} columns")
            scales = np.clip(data[:, 7:10], 1e-300, None)
            alphas = np.clip(data[:, 10], 1e-12, 1.0 - 1e-12)
            m.append_arrays(
                data[:, 0:3],
                data[:, 3:7],
                np.log(scales),
                np.log(alphas / (1.0 - alphas)),
                data[:, 11:14],
                data[:, 14:],
            )
            return m
