import numpy as np
import pytest

from splatmap.core import (
    CameraIntrinsics,
    Frame,
    Gaussian,
    GaussianMap,
    PoseSE3,
    backproject,
    covariance3d,
    project_point,
    quaternion_from_axis_angle,
    quaternion_to_rotation_matrix,
)

from conftest import random_pose


class TestQuaternions:
    def test_identity(self):
        np.testing.assert_allclose(
            quaternion_to_rotation_matrix([1, 0, 0, 0]), np.eye(3), atol=1e-12)

    def test_90deg_about_z(self):
        s = np.sqrt(0.5)
        R = quaternion_to_rotation_matrix([s, 0, 0, s])
        np.testing.assert_allclose(
            R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)

    def test_orthonormality_random(self, rng):
        for _ in range(50):
            q = rng.normal(size=4)
            R = quaternion_to_rotation_matrix(q)
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    def test_matches_axis_angle_construction(self, rng):
        """Brute-force oracle: Rodrigues formula vs quaternion conversion."""
        for _ in range(20):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(-np.pi, np.pi)
            K = np.array([[0, -axis[2], axis[1]],
                          [axis[2], 0, -axis[0]],
                          [-axis[1], axis[0], 0]])
            R_ref = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
            R = quaternion_to_rotation_matrix(quaternion_from_axis_angle(axis, angle))
            np.testing.assert_allclose(R, R_ref, atol=1e-9)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError, match="degenerate quaternion"):
            quaternion_to_rotation_matrix([0, 0, 0, 0])


class TestPose:
    def test_compose_inverse_is_identity(self, rng):
        for _ in range(20):
            p = random_pose(rng, max_angle=np.pi, max_shift=2.0)
            ident = p.compose(p.inverse())
            np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-9)

    def test_group_associativity(self, rng):
        a, b, c = (random_pose(rng, np.pi, 2.0) for _ in range(3))
        m1 = a.compose(b).compose(c).matrix()
        m2 = a.compose(b.compose(c)).matrix()
        np.testing.assert_allclose(m1, m2, atol=1e-9)

    def test_matrix_roundtrip(self, rng):
        p = random_pose(rng, np.pi, 2.0)
        q = PoseSE3.from_matrix(p.matrix())
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-9)

    def test_apply_matches_matrix(self, rng):
        p = random_pose(rng, np.pi, 2.0)
        pts = rng.normal(size=(7, 3))
        hom = np.concatenate([pts, np.ones((7, 1))], axis=1)
        np.testing.assert_allclose(p.apply(pts), (hom @ p.matrix().T)[:, :3],
                                   atol=1e-12)


class TestCovariance:
    def _gaussian(self, log_scale, rotation):
        return Gaussian(color=[0.5, 0.5, 0.5], mu=[0, 0, 1],
                        log_scale=log_scale, rotation=rotation,
                        opacity_logit=0.0, class_vec=np.zeros(3))

    def test_unit(self):
        g = self._gaussian([0, 0, 0], [1, 0, 0, 0])
        np.testing.assert_allclose(covariance3d(g), np.eye(3), atol=1e-12)

    def test_axis_aligned(self):
        g = self._gaussian([np.log(2), 0, 0], [1, 0, 0, 0])
        np.testing.assert_allclose(covariance3d(g), np.diag([4, 1, 1]), atol=1e-12)

    def test_eigenvalues_equal_squared_scales(self, rng):
        for _ in range(20):
            ls = rng.uniform(-2, 1, 3)
            g = self._gaussian(ls, rng.normal(size=4))
            ev = np.sort(np.linalg.eigvalsh(covariance3d(g)))
            np.testing.assert_allclose(ev, np.sort(np.exp(2 * ls)), rtol=1e-9)

    def test_sign_flip_invariance(self, rng):
        q = rng.normal(size=4)
        a = covariance3d(self._gaussian([0.1, -0.3, 0.2], q))
        b = covariance3d(self._gaussian([0.1, -0.3, 0.2], -q))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestBackprojection:
    def test_principal_point(self, small_camera):
        p = backproject(small_camera.cx, small_camera.cy, 1.0, small_camera,
                        PoseSE3.identity())
        np.testing.assert_allclose(p, [0, 0, 1], atol=1e-12)

    def test_one_focal_length_offset(self):
        K = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        p = backproject(K.cx + K.fx, K.cy, 2.0, K, PoseSE3.identity())
        np.testing.assert_allclose(p, [2, 0, 2], atol=1e-12)

    def test_roundtrip_random(self, rng, small_camera):
        pose = random_pose(rng)
        u = rng.uniform(0, small_camera.width - 1, 1000)
        v = rng.uniform(0, small_camera.height - 1, 1000)
        d = rng.uniform(0.3, 5.0, 1000)
        pts = backproject(u, v, d, small_camera, pose)
        u2, v2, d2 = project_point(pts, small_camera, pose)
        assert np.abs(u2 - u).max() < 1e-6
        assert np.abs(v2 - v).max() < 1e-6
        assert np.abs(d2 - d).max() < 1e-9

    def test_invalid_depth(self, small_camera):
        with pytest.raises(ValueError, match="invalid depth"):
            backproject(1.0, 1.0, 0.0, small_camera, PoseSE3.identity())

    def test_depth_homogeneity_identity_rotation(self, small_camera):
        pose = PoseSE3(t=np.array([0.3, -0.2, 0.1]))
        a = backproject(5.0, 7.0, 1.0, small_camera, pose) - pose.t
        b = backproject(5.0, 7.0, 2.0, small_camera, pose) - pose.t
        np.testing.assert_allclose(b, 2 * a, atol=1e-12)


class TestContainers:
    def test_frame_shape_validation(self):
        with pytest.raises(ValueError):
            Frame(0, 0.0, np.zeros((4, 4, 3)), np.zeros((4, 5)),
                  np.zeros((4, 4), dtype=np.uint8))

    def test_map_append_and_access(self, rng):
        m = GaussianMap(num_classes=4)
        g = Gaussian(color=[0.1, 0.2, 0.3], mu=[1, 2, 3], log_scale=[-2, -2, -2],
                     rotation=[1, 0, 0, 0], opacity_logit=0.5,
                     class_vec=[0, 1, 0, 0], epoch=7)
        m.append([g])
        assert len(m) == 1
        back = m.gaussian(0)
        np.testing.assert_allclose(back.mu, [1, 2, 3])
        assert back.epoch == 7
        assert back.opacity == pytest.approx(1 / (1 + np.exp(-0.5)))

    def test_map_rejects_wrong_class_count(self):
        m = GaussianMap(num_classes=4)
        g = Gaussian(color=[0.1, 0.2, 0.3], mu=[1, 2, 3], log_scale=[-2, -2, -2],
                     rotation=[1, 0, 0, 0], opacity_logit=0.5, class_vec=[1, 0])
        with pytest.raises(ValueError):
            m.append([g])

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=1, cy=1, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=10, fy=10, cx=99, cy=1, width=4, height=4)
