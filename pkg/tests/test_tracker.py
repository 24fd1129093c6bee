import numpy as np
import pytest

from splatmap.core import (
    CameraIntrinsics,
    Frame,
    PoseSE3,
    quaternion_angle,
    quaternion_from_axis_angle,
    quaternion_multiply,
)
from splatmap.synthetic import SyntheticConfig, generate_frame, orbit_pose, render_ground_truth
from splatmap.tracker import (
    PoseCorrection,
    Tracker,
    TrackerConfig,
    Trajectory,
    detect_pose_corrections,
    estimate_pose_icp,
    loop_candidate,
    mean_reprojection_flow,
    select_keyframe,
)

from conftest import random_pose


@pytest.fixture(scope="module")
def room():
    cfg = SyntheticConfig(frames=8, width=80, height=60)
    return cfg, cfg.intrinsics()


def _const_depth_frame(K, depth, pose):
    h, w = K.height, K.width
    return Frame(0, 0.0, np.zeros((h, w, 3)), np.full((h, w), float(depth)),
                 np.full((h, w), 255, np.uint8), pose=pose)


class TestFlow:
    def test_identical_poses_zero(self, small_camera):
        f = _const_depth_frame(small_camera, 2.0, PoseSE3.identity())
        assert mean_reprojection_flow(f, PoseSE3.identity(), small_camera) == 0.0

    def test_pure_translation_pinhole(self, small_camera):
        d, t = 2.0, 0.05
        f = _const_depth_frame(small_camera, d, PoseSE3.identity())
        flow = mean_reprojection_flow(f, PoseSE3(t=[t, 0, 0]), small_camera)
        assert flow == pytest.approx(small_camera.fx * t / d, rel=1e-9)

    def test_matches_bruteforce_average(self, rng, small_camera):
        prev_pose = random_pose(rng)
        cur_pose = PoseSE3(
            quaternion_multiply(quaternion_from_axis_angle([0, 1, 0], 0.02),
                                prev_pose.q),
            prev_pose.t + [0.01, -0.005, 0.02])
        h, w = small_camera.height, small_camera.width
        depth = rng.uniform(1.0, 3.0, (h, w))
        f = Frame(0, 0.0, np.zeros((h, w, 3)), depth,
                  np.full((h, w), 255, np.uint8), pose=prev_pose)
        flow = mean_reprojection_flow(f, cur_pose, small_camera, subsample=4)
        # brute force with explicit per-pixel loops
        total, count = 0.0, 0
        R_prev = prev_pose.rotation_matrix()
        R_cur = cur_pose.rotation_matrix()
        for v in range(0, h, 4):
            for u in range(0, w, 4):
                d = depth[v, u]
                pc = np.array([(u - small_camera.cx) / small_camera.fx * d,
                               (v - small_camera.cy) / small_camera.fy * d, d])
                pw = R_prev @ pc + prev_pose.t
                q = R_cur.T @ (pw - cur_pose.t)
                if q[2] <= 1e-6:
                    continue
                u2 = small_camera.fx * q[0] / q[2] + small_camera.cx
                v2 = small_camera.fy * q[1] / q[2] + small_camera.cy
                if 0 <= u2 <= w - 1 and 0 <= v2 <= h - 1:
                    total += np.hypot(u2 - u, v2 - v)
                    count += 1
        assert flow == pytest.approx(total / count, abs=1e-9)

    def test_invariant_to_global_rigid_transform(self, rng, small_camera):
        prev_pose = random_pose(rng)
        cur_pose = PoseSE3(prev_pose.q, prev_pose.t + [0.03, 0, -0.01])
        h, w = small_camera.height, small_camera.width
        depth = rng.uniform(1.0, 3.0, (h, w))
        f = Frame(0, 0.0, np.zeros((h, w, 3)), depth,
                  np.full((h, w), 255, np.uint8), pose=prev_pose)
        base = mean_reprojection_flow(f, cur_pose, small_camera)
        g = random_pose(rng, max_angle=2.0, max_shift=5.0)
        f2 = Frame(0, 0.0, f.rgb, f.depth, f.semantic, pose=g.compose(prev_pose))
        moved = mean_reprojection_flow(f2, g.compose(cur_pose), small_camera)
        assert moved == pytest.approx(base, abs=1e-9)


class TestKeyframeRule:
    def test_strictly_greater(self):
        cfg = TrackerConfig(keyframe_flow_thresh=12.0)
        assert select_keyframe(13.0, cfg)
        assert not select_keyframe(12.0, cfg)

    def test_loop_candidate_gate(self):
        cfg = TrackerConfig(loop_flow_thresh=6.0, loop_min_separation=30)
        assert loop_candidate(5.0, 31, cfg)
        assert not loop_candidate(6.0, 31, cfg)
        assert not loop_candidate(5.0, 30, cfg)


class TestIcp:
    def test_identity_on_same_frame(self, room):
        cfg, K = room
        f = generate_frame(cfg, K, 0, 0.7)
        res = estimate_pose_icp(f, f, f.pose, K, TrackerConfig(mode="icp"))
        np.testing.assert_allclose(res.pose.t, f.pose.t, atol=1e-6)
        assert quaternion_angle(res.pose.q, f.pose.q) < 1e-6
        assert res.residual < 1e-6
        assert not res.flagged

    def test_recovers_1cm_translation(self, room):
        cfg, K = room
        ref = generate_frame(cfg, K, 0, 0.4)
        gt = PoseSE3(ref.pose.q, ref.pose.t + [0.01, 0.0, 0.0])
        rgb, depth, labels = render_ground_truth(cfg, K, gt)
        cur = Frame(1, 0.1, rgb, depth, labels)
        res = estimate_pose_icp(cur, ref, ref.pose, K, TrackerConfig(mode="icp"))
        assert np.linalg.norm(res.pose.t - gt.t) < 1e-3
        assert res.correspondences >= 100

    def test_recovers_2deg_rotation(self, room):
        cfg, K = room
        ref = generate_frame(cfg, K, 0, 1.1)
        q = quaternion_multiply(ref.pose.q,
                                quaternion_from_axis_angle([0, 1, 0], np.deg2rad(2)))
        gt = PoseSE3(q, ref.pose.t)
        rgb, depth, labels = render_ground_truth(cfg, K, gt)
        cur = Frame(1, 0.1, rgb, depth, labels)
        res = estimate_pose_icp(cur, ref, ref.pose, K, TrackerConfig(mode="icp"))
        assert np.rad2deg(quaternion_angle(res.pose.q, gt.q)) < 0.2

    def test_insufficient_overlap(self, room):
        cfg, K = room
        ref = generate_frame(cfg, K, 0, 0.0)
        cur = generate_frame(cfg, K, 1, 0.1)
        cur = Frame(1, 0.1, cur.rgb, np.zeros_like(cur.depth), cur.semantic)
        with pytest.raises(ValueError, match="insufficient overlap"):
            estimate_pose_icp(cur, ref, ref.pose, K, TrackerConfig(mode="icp"))


class TestCorrections:
    def _traj(self, poses, start=0):
        ts = np.arange(start, start + len(poses)) / 30.0
        return Trajectory(ts, poses, np.arange(start, start + len(poses)))

    def test_identical_trajectories_empty(self, rng):
        poses = [random_pose(rng) for _ in range(5)]
        old = self._traj(poses)
        new = self._traj([p.copy() for p in poses])
        assert detect_pose_corrections(old, new) == []

    def test_single_moved_frame(self, rng):
        poses = [random_pose(rng) for _ in range(5)]
        moved = [p.copy() for p in poses]
        moved[2] = PoseSE3(poses[2].q, poses[2].t + [0.02, 0, 0])
        out = detect_pose_corrections(self._traj(poses), self._traj(moved))
        assert len(out) == 1
        c = out[0]
        assert c.frame_index == 2
        assert c.magnitude == pytest.approx(0.02, abs=1e-9)

    def test_matches_threshold_filter(self, rng):
        poses = [random_pose(rng) for _ in range(20)]
        new = []
        for p in poses:
            dt = rng.uniform(0, 0.03, 3) * (rng.uniform() < 0.5)
            new.append(PoseSE3(p.q, p.t + dt))
        out = detect_pose_corrections(self._traj(poses), self._traj(new),
                                      trans_thresh=0.01, rot_thresh_deg=0.5)
        expect = [i for i, (a, b) in enumerate(zip(poses, new))
                  if np.linalg.norm(a.t - b.t) > 0.01]
        assert [c.frame_index for c in out] == expect


class TestTrackerModes:
    def test_ground_truth_bitwise(self, room):
        cfg, K = room
        tr = Tracker(TrackerConfig(mode="ground_truth"), K)
        for i in range(3):
            f = generate_frame(cfg, K, i, 0.2 * i)
            gt_pose = f.pose
            pose, _, _ = tr.track(f)
            assert pose is gt_pose  # playback, not a copy

    def test_ground_truth_requires_pose(self, small_camera):
        tr = Tracker(TrackerConfig(mode="ground_truth"), small_camera)
        f = _const_depth_frame(small_camera, 1.0, None)
        with pytest.raises(ValueError):
            tr.track(f)

    def test_first_frame_is_keyframe(self, room):
        cfg, K = room
        tr = Tracker(TrackerConfig(mode="ground_truth"), K)
        f = generate_frame(cfg, K, 0, 0.0)
        _, is_kf, _ = tr.track(f)
        assert is_kf and f.is_keyframe

    def test_icp_mode_tracks_orbit(self, room):
        cfg, K = room
        tr = Tracker(TrackerConfig(mode="icp", keyframe_flow_thresh=8.0), K)
        errs = []
        for i in range(4):
            f = generate_frame(cfg, K, i, 0.05 * i)
            gt = f.pose
            f.pose = gt if i == 0 else None
            pose, _, _ = tr.track(f)
            errs.append(np.linalg.norm(pose.t - gt.t))
        assert max(errs) < 0.005
