"""Scene primitives shared by every stage: quaternions, SE(3) poses, the
pinhole camera model, anisotropic 3D Gaussians and the map container.

Conventions fixed here and used everywhere else:
  * quaternions are (w, x, y, z), kept unit-norm,
  * poses are camera-to-world (applying a pose to a camera-frame point
    yields world coordinates), right-handed, +z forward,
  * scales are stored as natural logs, opacity as a logit,
  * depth 0 marks an invalid measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# quaternions


def normalize_quaternion(q):
    """Return q scaled to unit norm; raises on a degenerate (zero) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("degenerate quaternion")
    return q / n


def quaternion_to_rotation_matrix(q):
    """Rotation matrix of a (w, x, y, z) quaternion, renormalized internally."""
    w, x, y, z = normalize_quaternion(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quaternion_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quaternion_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quaternion_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quaternion_from_rotation_matrix(R):
    """Inverse of quaternion_to_rotation_matrix (Shepperd's branch selection)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return normalize_quaternion(q)


def quaternion_angle(a, b):
    """Geodesic rotation angle in radians between two unit quaternions."""
    d = abs(float(np.dot(normalize_quaternion(a), normalize_quaternion(b))))
    return 2.0 * np.arccos(min(1.0, d))


# ---------------------------------------------------------------------------
# SE(3)


@dataclass
class PoseSE3:
    """Camera-to-world rigid transform: world = R(q) @ p_cam + t."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = normalize_quaternion(self.q)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    @staticmethod
    def identity():
        return PoseSE3()

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=np.float64)
        return PoseSE3(quaternion_from_rotation_matrix(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self):
        return quaternion_to_rotation_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    def inverse(self):
        R = self.rotation_matrix()
        return PoseSE3(quaternion_conjugate(self.q), -R.T @ self.t)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply `other` first, then `self`."""
        return PoseSE3(
            quaternion_multiply(self.q, other.q),
            self.rotation_matrix() @ other.t + self.t,
        )

    def apply(self, points):
        """Transform camera-frame point(s) (..., 3) into world coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.t

    def copy(self):
        return PoseSE3(self.q.copy(), self.t.copy())


def pose_delta(a: PoseSE3, b: PoseSE3):
    """(translation delta [m], rotation delta [rad]) between two poses."""
    dt = float(np.linalg.norm(a.t - b.t))
    return dt, quaternion_angle(a.q, b.q)


# ---------------------------------------------------------------------------
# camera


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0  # raw units per meter in stored depth files

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self):
        return np.array(
            [[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64
        )


def backproject(u, v, d, K: CameraIntrinsics, pose: PoseSE3):
    """Lift pixel (u, v) with depth d [m] into a world-frame 3D point."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("invalid depth")
    x = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx * d
    y = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy * d
    p_cam = np.stack([x, y, d], axis=-1)
    return pose.apply(p_cam)


def project_point(p_world, K: CameraIntrinsics, pose: PoseSE3):
    """World point(s) -> (u, v, depth) through a camera-to-world pose."""
    p = np.asarray(p_world, dtype=np.float64)
    R = pose.rotation_matrix()
    p_cam = (p - pose.t) @ R
    z = p_cam[..., 2]
    u = K.fx * p_cam[..., 0] / z + K.cx
    v = K.fy * p_cam[..., 1] / z + K.cy
    return u, v, z


# ---------------------------------------------------------------------------
# Gaussians


@dataclass
class Gaussian:
    """One anisotropic splat: color, world center, per-axis log standard
    deviation [m], unit quaternion orientation, opacity logit, per-class
    score vector, plus engine bookkeeping."""

    color: np.ndarray
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    class_vec: np.ndarray
    update_count: int = 0
    epoch: int = 0

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3).copy()
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3).copy()
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3).copy()
        self.rotation = normalize_quaternion(self.rotation)
        self.class_vec = np.asarray(self.class_vec, dtype=np.float64).ravel().copy()
        self.opacity_logit = float(self.opacity_logit)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self):
        return np.exp(self.log_scale)


def covariance3d(g: Gaussian):
    """World-frame covariance R diag(exp(2*log_scale)) R^T of a Gaussian."""
    R = quaternion_to_rotation_matrix(g.rotation)
    return (R * np.exp(2.0 * g.log_scale)) @ R.T


class GaussianMap:
    """Ordered, growing store of Gaussians.

    Parameters live in structure-of-arrays form so the renderer and the
    lifecycle operations can stay vectorized; `gaussian(i)` materializes a
    value-type view for callers that want one primitive.  Single writer:
    every mutation bumps `version`, which renders use to detect staleness.
    """

    def __init__(self, num_classes: int = 20, config=None):
        self.num_classes = int(num_classes)
        self.config = config
        self.colors = np.zeros((0, 3))
        self.means = np.zeros((0, 3))
        self.log_scales = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.opacity_logits = np.zeros(0)
        self.class_vecs = np.zeros((0, self.num_classes))
        self.update_counts = np.zeros(0, dtype=np.int64)
        self.epochs = np.zeros(0, dtype=np.int64)
        self.version = 0

    def __len__(self):
        return self.means.shape[0]

    def _bump(self):
        self.version += 1

    def append_arrays(self, colors, means, log_scales, rotations, opacity_logits,
                      class_vecs, update_counts=None, epochs=None, epoch=0):
        n = len(means)
        if n == 0:
            return
        colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        means = np.asarray(means, dtype=np.float64).reshape(n, 3)
        log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        rotations = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
        class_vecs = np.asarray(class_vecs, dtype=np.float64).reshape(n, self.num_classes)
        if update_counts is None:
            update_counts = np.zeros(n, dtype=np.int64)
        if epochs is None:
            epochs = np.full(n, epoch, dtype=np.int64)
        self.colors = np.concatenate([self.colors, colors])
        self.means = np.concatenate([self.means, means])
        self.log_scales = np.concatenate([self.log_scales, log_scales])
        self.rotations = np.concatenate([self.rotations, rotations])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(n)]
        )
        self.class_vecs = np.concatenate([self.class_vecs, class_vecs])
        self.update_counts = np.concatenate(
            [self.update_counts, np.asarray(update_counts, dtype=np.int64).reshape(n)]
        )
        self.epochs = np.concatenate([self.epochs, np.asarray(epochs, dtype=np.int64).reshape(n)])
        self._bump()

    def append(self, gaussians):
        gs = list(gaussians)
        if not gs:
            return
        for g in gs:
            if g.class_vec.shape[0] != self.num_classes:
                raise ValueError("class_vec length does not match map num_classes")
        self.append_arrays(
            [g.color for g in gs],
            [g.mu for g in gs],
            [g.log_scale for g in gs],
            [g.rotation for g in gs],
            [g.opacity_logit for g in gs],
            [g.class_vec for g in gs],
            np.array([g.update_count for g in gs], dtype=np.int64),
            np.array([g.epoch for g in gs], dtype=np.int64),
        )

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            color=self.colors[i],
            mu=self.means[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=self.opacity_logits[i],
            class_vec=self.class_vecs[i],
            update_count=int(self.update_counts[i]),
            epoch=int(self.epochs[i]),
        )

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def keep(self, mask):
        """Drop every Gaussian where mask is False, preserving order."""
        mask = np.asarray(mask, dtype=bool)
        self.colors = self.colors[mask]
        self.means = self.means[mask]
        self.log_scales = self.log_scales[mask]
        self.rotations = self.rotations[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.class_vecs = self.class_vecs[mask]
        self.update_counts = self.update_counts[mask]
        self.epochs = self.epochs[mask]
        self._bump()

    def set_parameters(self, colors=None, means=None, log_scales=None,
                       rotations=None, opacity_logits=None):
        """Replace parameter arrays wholesale (used by the lifecycle steps);
        quaternions are renormalized and the version counter bumps once."""
        if colors is not None:
            self.colors = np.asarray(colors, dtype=np.float64)
        if means is not None:
            self.means = np.asarray(means, dtype=np.float64)
        if log_scales is not None:
            self.log_scales = np.asarray(log_scales, dtype=np.float64)
        if rotations is not None:
            self.rotations = np.asarray(rotations, dtype=np.float64)
            self.renormalize_rotations()
        if opacity_logits is not None:
            self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64)
        self._bump()

    def renormalize_rotations(self):
        n = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(n < 1e-12):
            raise ValueError("degenerate quaternion")
        self.rotations = self.rotations / n

    def copy(self):
        m = GaussianMap(self.num_classes, self.config)
        m.colors = self.colors.copy()
        m.means = self.means.copy()
        m.log_scales = self.log_scales.copy()
        m.rotations = self.rotations.copy()
        m.opacity_logits = self.opacity_logits.copy()
        m.class_vecs = self.class_vecs.copy()
        m.update_counts = self.update_counts.copy()
        m.epochs = self.epochs.copy()
        return m


# ---------------------------------------------------------------------------
# frames


@dataclass
class Frame:
    """One RGB-D input with per-pixel class labels (255 = unlabeled)."""

    index: int
    timestamp: float
    rgb: np.ndarray          # H x W x 3 in [0, 1]
    depth: np.ndarray        # H x W meters, 0 = invalid
    semantic: np.ndarray     # H x W class ids, 255 = unlabeled
    pose: PoseSE3 | None = None
    is_keyframe: bool = False

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.semantic = np.asarray(self.semantic)
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.semantic.shape != (h, w):
            raise ValueError("rgb/depth/semantic shapes disagree")
        if np.any(self.depth < 0):
            raise ValueError("negative depth")

    @property
    def size(self):
        return self.depth.shape
