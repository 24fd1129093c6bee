"""Pose provision for the mapping pipeline.

Two modes: ground-truth playback (poses come straight from the dataset) and
classical frame-to-model ICP odometry (projective point-to-plane, Gauss-
Newton).  Keyframes are selected when the geometric reprojection flow since
the last keyframe exceeds a threshold; pose-correction events are emitted by
diffing an old trajectory against an externally corrected one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    CameraIntrinsics,
    Frame,
    PoseSE3,
    pose_delta,
    quaternion_from_axis_angle,
)

MIN_ICP_CORRESPONDENCES = 100
ICP_RESIDUAL_FLAG = 0.05  # meters


@dataclass
class TrackerConfig:
    mode: str = "ground_truth"            # "ground_truth" | "icp"
    keyframe_flow_thresh: float = 12.0    # pixels
    icp_iters: int = 10
    icp_max_corr_dist: float = 0.1        # meters
    loop_flow_thresh: float = 6.0         # pixels
    loop_min_separation: int = 30         # frames

    def __post_init__(self):
        if self.mode not in ("ground_truth", "icp"):
            raise ValueError(f"unknown tracker mode: {self.mode}")
        if min(self.keyframe_flow_thresh, self.icp_max_corr_dist,
               self.loop_flow_thresh) <= 0 or self.icp_iters < 1:
            raise ValueError("tracker thresholds must be positive")


@dataclass
class PoseCorrection:
    frame_index: int
    old_pose: PoseSE3
    new_pose: PoseSE3
    magnitude: float      # translation delta [m] + rotation delta [rad]


@dataclass
class Trajectory:
    """Time-indexed camera-to-world poses."""

    timestamps: np.ndarray
    poses: list
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.indices is None:
            self.indices = np.arange(len(self.poses))
        else:
            self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


def mean_reprojection_flow(prev: Frame, cur_pose: PoseSE3, K: CameraIntrinsics,
                           subsample: int = 8) -> float:
    """Mean 2D displacement of prev's valid-depth pixels reprojected into the
    current pose; a geometric stand-in for photometric optical flow."""
    if prev.pose is None:
        raise ValueError("previous frame has no pose")
    h, w = prev.size
    ys, xs = np.mgrid[0:h:subsample, 0:w:subsample]
    xs = xs.ravel()
    ys = ys.ravel()
    d = prev.depth[ys, xs]
    ok = d > 0
    xs, ys, d = xs[ok], ys[ok], d[ok]
    if len(xs) == 0:
        return 0.0
    x = (xs - K.cx) / K.fx * d
    y = (ys - K.cy) / K.fy * d
    p_world = prev.pose.apply(np.stack([x, y, d], axis=-1))
    R = cur_pose.rotation_matrix()
    p_cam = (p_world - cur_pose.t) @ R
    z = p_cam[:, 2]
    vis = z > 1e-6
    u = K.fx * p_cam[vis, 0] / z[vis] + K.cx
    v = K.fy * p_cam[vis, 1] / z[vis] + K.cy
    inside = (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    if not inside.any():
        return float("inf")
    du = u[inside] - xs[vis][inside]
    dv = v[inside] - ys[vis][inside]
    return float(np.hypot(du, dv).mean())


def select_keyframe(flow: float, cfg: TrackerConfig) -> bool:
    """Keyframe when the mean flow strictly exceeds the threshold."""
    return flow > cfg.keyframe_flow_thresh


def loop_candidate(flow: float, separation: int, cfg: TrackerConfig) -> bool:
    """Gate for loop-closure candidates: low mutual flow, far apart in time."""
    return flow < cfg.loop_flow_thresh and separation > cfg.loop_min_separation


def _camera_points(depth, K):
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    z = depth
    x = (xs - K.cx) / K.fx * z
    y = (ys - K.cy) / K.fy * z
    return np.stack([x, y, z], axis=-1)


def _normals_from_depth(points, valid):
    """Central-difference surface normals of an organized point cloud."""
    h, w = valid.shape
    n = np.zeros_like(points)
    ok = np.zeros((h, w), dtype=bool)
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    cross = np.cross(dx, dy)
    norm = np.linalg.norm(cross, axis=-1)
    good = (norm > 1e-12) & valid[1:-1, 2:] & valid[1:-1, :-2] \
        & valid[2:, 1:-1] & valid[:-2, 1:-1] & valid[1:-1, 1:-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = cross / norm[..., None]
    n[1:-1, 1:-1] = np.where(good[..., None], unit, 0.0)
    ok[1:-1, 1:-1] = good
    # orient toward the camera
    flip = (n * points).sum(axis=-1) > 0
    n[flip] = -n[flip]
    return n, ok


def _se3_exp(xi):
    """Twist (omega, v) -> incremental PoseSE3 with first-order translation."""
    omega = xi[:3]
    v = xi[3:]
    angle = float(np.linalg.norm(omega))
    q = quaternion_from_axis_angle(omega, angle) if angle > 0 else np.array([1.0, 0, 0, 0])
    return PoseSE3(q, v)


@dataclass
class IcpResult:
    pose: PoseSE3
    residual: float          # median point-to-plane distance [m]
    flagged: bool            # residual above the trust threshold
    correspondences: int


def estimate_pose_icp(cur: Frame, ref: Frame, init: PoseSE3, K: CameraIntrinsics,
                      cfg: TrackerConfig) -> IcpResult:
    """Projective point-to-plane ICP of `cur` against the posed `ref` frame.

    Returns the camera-to-world pose of `cur`; Gauss-Newton on a 6-vector
    twist, `icp_iters` iterations, correspondences gated by distance.  Raises
    on insufficient overlap (< 100 correspondences).
    """
    if ref.pose is None:
        raise ValueError("reference frame has no pose")
    ref_pts = _camera_points(ref.depth, K)
    ref_valid = ref.depth > 0
    ref_nrm, nrm_ok = _normals_from_depth(ref_pts, ref_valid)

    cur_valid = cur.depth > 0
    cur_pts = _camera_points(cur.depth, K)[cur_valid]

    # current-camera -> reference-camera transform, refined in place
    T = ref.pose.inverse().compose(init)
    residual = float("inf")
    count = 0
    for _ in range(cfg.icp_iters):
        R = T.rotation_matrix()
        p = cur_pts @ R.T + T.t
        z = p[:, 2]
        vis = z > 1e-6
        u = np.rint(K.fx * p[:, 0] / np.where(vis, z, 1.0) + K.cx).astype(np.int64)
        v = np.rint(K.fy * p[:, 1] / np.where(vis, z, 1.0) + K.cy).astype(np.int64)
        vis &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        uu = u[vis]
        vv = v[vis]
        ok = ref_valid[vv, uu] & nrm_ok[vv, uu]
        pv = p[vis][ok]
        q = ref_pts[vv[ok], uu[ok]]
        n = ref_nrm[vv[ok], uu[ok]]
        dist = np.linalg.norm(pv - q, axis=1)
        r = ((pv - q) * n).sum(axis=1)
        inlier = (dist < cfg.icp_max_corr_dist) & (np.abs(r) < cfg.icp_max_corr_dist)
        pv, n, r = pv[inlier], n[inlier], r[inlier]
        count = len(r)
        if count < MIN_ICP_CORRESPONDENCES:
            raise ValueError("insufficient overlap")
        J = np.concatenate([np.cross(pv, n), n], axis=1)
        H = J.T @ J
        # Tikhonov damping keeps the solve bounded when the visible geometry
        # under-constrains the motion (e.g. a single plane in view)
        H += 1e-6 * np.trace(H) / 6.0 * np.eye(6)
        g = J.T @ r
        try:
            xi = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        T = _se3_exp(xi).compose(T)
        residual = float(np.median(np.abs(r)))
    pose = ref.pose.compose(T)
    return IcpResult(pose=pose, residual=residual,
                     flagged=residual > ICP_RESIDUAL_FLAG, correspondences=count)


def detect_pose_corrections(old_traj: Trajectory, new_traj: Trajectory,
                            trans_thresh: float = 0.01,
                            rot_thresh_deg: float = 0.5) -> list[PoseCorrection]:
    """Corrections for frames whose pose moved beyond either threshold
    between the two trajectories (matched by frame index)."""
    new_by_index = {int(i): p for i, p in zip(new_traj.indices, new_traj.poses)}
    rot_thresh = np.deg2rad(rot_thresh_deg)
    out = []
    for i, old in zip(old_traj.indices, old_traj.poses):
        new = new_by_index.get(int(i))
        if new is None:
            continue
        dt, dr = pose_delta(old, new)
        if dt > trans_thresh or dr > rot_thresh:
            out.append(PoseCorrection(int(i), old, new, dt + dr))
    return out


class Tracker:
    """Stateful pose provider feeding the mapping stage.

    Ground-truth mode replays dataset poses bitwise; ICP mode chains
    projective point-to-plane odometry against the last keyframe.
    """

    def __init__(self, cfg: TrackerConfig, K: CameraIntrinsics):
        self.cfg = cfg
        self.K = K
        self.last_keyframe: Frame | None = None
        self.trajectory = Trajectory(np.zeros(0), [], np.zeros(0, dtype=np.int64))

    def track(self, frame: Frame):
        """Assign a pose to the frame and decide keyframe status.

        Returns (pose, is_keyframe, flow).  The first frame is always a
        keyframe; in ICP mode it anchors at the dataset pose when present,
        identity otherwise.
        """
        if self.cfg.mode == "ground_truth":
            if frame.pose is None:
                raise ValueError(f"frame {frame.index} has no ground-truth pose")
            pose = frame.pose
        else:
            if self.last_keyframe is None:
                pose = frame.pose if frame.pose is not None else PoseSE3.identity()
            else:
                init = self.trajectory.poses[-1]
                pose = estimate_pose_icp(frame, self.last_keyframe, init,
                                         self.K, self.cfg).pose
        frame.pose = pose

        if self.last_keyframe is None:
            flow = float("inf")
            is_kf = True
        else:
            flow = mean_reprojection_flow(self.last_keyframe, pose, self.K)
            is_kf = select_keyframe(flow, self.cfg)
        frame.is_keyframe = is_kf
        if is_kf:
            self.last_keyframe = frame
        self.trajectory.timestamps = np.append(self.trajectory.timestamps, frame.timestamp)
        self.trajectory.poses.append(pose)
        self.trajectory.indices = np.append(self.trajectory.indices, frame.index)
        return pose, is_kf, flow
