import numpy as np
import pytest

from splatmap.core import (
    CameraIntrinsics,
    Gaussian,
    GaussianMap,
    PoseSE3,
    covariance3d,
    project_point,
)
from splatmap.renderer import (
    ALPHA_CLAMP,
    ALPHA_SKIP,
    LOWPASS,
    ReferenceCompositor,
    composite_pixel_reference,
    project_gaussian,
    render,
    render_reference,
)

from conftest import random_map, random_pose


def _gauss(mu, scale=0.05, color=(0.5, 0.5, 0.5), opacity_logit=2.0, n=3):
    return Gaussian(color=color, mu=mu, log_scale=np.log([scale] * 3),
                    rotation=[1, 0, 0, 0], opacity_logit=opacity_logit,
                    class_vec=np.zeros(n))


class TestProjection:
    def test_on_axis(self):
        K = CameraIntrinsics(fx=100, fy=100, cx=16, cy=16, width=32, height=32)
        g = _gauss([0, 0, 1.0], scale=0.01)
        p = project_gaussian(g, K, PoseSE3.identity())
        np.testing.assert_allclose(p.mean2d, [16, 16], atol=1e-12)
        assert p.depth_cam == pytest.approx(1.0)
        # on-axis Jacobian is diagonal: fx^2 * exp(2 log s) + low-pass
        expected = 100.0**2 * 0.01**2 + LOWPASS
        np.testing.assert_allclose(np.diag(p.cov2d), [expected, expected], rtol=1e-9)
        assert p.cov2d[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_behind_camera_culled(self, small_camera):
        assert project_gaussian(_gauss([0, 0, -1.0]), small_camera,
                                PoseSE3.identity()) is None

    def test_far_outside_image_culled(self, small_camera):
        assert project_gaussian(_gauss([50.0, 0, 1.0], scale=0.01), small_camera,
                                PoseSE3.identity()) is None

    def test_cov2d_matches_numerical_jacobian(self, rng, small_camera):
        """Finite-difference oracle for the first-order projected covariance."""
        for _ in range(10):
            pose = random_pose(rng)
            mu = pose.apply(np.array([rng.uniform(-0.2, 0.2),
                                      rng.uniform(-0.2, 0.2),
                                      rng.uniform(0.8, 2.0)]))
            g = Gaussian(color=[0.5] * 3, mu=mu,
                         log_scale=rng.uniform(np.log(0.02), np.log(0.1), 3),
                         rotation=rng.normal(size=4), opacity_logit=1.0,
                         class_vec=np.zeros(3))
            p = project_gaussian(g, small_camera, pose)
            if p is None:
                continue
            h = 1e-6
            J = np.zeros((2, 3))
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                up, vp, _ = project_point(g.mu + dp, small_camera, pose)
                um, vm, _ = project_point(g.mu - dp, small_camera, pose)
                J[:, k] = [(up - um) / (2 * h), (vp - vm) / (2 * h)]
            expected = J @ covariance3d(g) @ J.T + LOWPASS * np.eye(2)
            np.testing.assert_allclose(p.cov2d, expected, rtol=1e-4, atol=1e-6)


def _reference_image(m, K, pose):
    return render_reference(m, K, pose)


class TestCompositing:
    def test_empty_map(self, small_camera):
        out = render(GaussianMap(num_classes=3), small_camera, PoseSE3.identity())
        assert not out.silhouette.any()
        assert not out.color.any()
        assert not out.depth.any()

    def test_single_opaque_gaussian(self):
        # alpha clamps at 0.99, so one splat converges to 0.99 * quantity
        K = CameraIntrinsics(fx=100, fy=100, cx=8, cy=8, width=16, height=16)
        g = _gauss([0, 0, 1.0], scale=0.2, color=(0.2, 0.6, 0.9), opacity_logit=12.0)
        m = GaussianMap(num_classes=3)
        m.append([g])
        out = render(m, K, PoseSE3.identity())
        np.testing.assert_allclose(out.color[8, 8], [0.2, 0.6, 0.9], atol=0.0101)
        assert out.depth[8, 8] == pytest.approx(1.0, abs=0.0101)
        assert out.silhouette[8, 8] == pytest.approx(0.99, abs=1e-12)

    def test_two_overlapping_half_alpha(self):
        """Closed-form two-term compositing: 0.5 c1 + 0.25 c2, S = 0.75.

        The center pixel coincides with both projected means, so alpha there
        equals the opacity exactly regardless of the footprint."""
        K = CameraIntrinsics(fx=100, fy=100, cx=8, cy=8, width=16, height=16)
        m = GaussianMap(num_classes=2)
        logit_half = 0.0  # sigmoid(0) = 0.5
        for depth_, col in ((1.0, (1.0, 0.0, 0.0)), (2.0, (0.0, 1.0, 0.0))):
            m.append([Gaussian(color=col, mu=[0, 0, depth_],
                               log_scale=np.log([0.05 * depth_] * 3),
                               rotation=[1, 0, 0, 0], opacity_logit=logit_half,
                               class_vec=np.zeros(2))])
        out = render(m, K, PoseSE3.identity())
        np.testing.assert_allclose(out.color[8, 8], [0.5, 0.25, 0.0], atol=1e-12)
        assert out.silhouette[8, 8] == pytest.approx(0.75, abs=1e-12)

    def test_alpha_formula_single_contributor(self):
        """alpha at one pixel offset with unit covariance: o * exp(-1/2)."""
        from splatmap.renderer import Projected2D
        splat = (Projected2D(np.array([1.0, 0.0]), np.eye(2), 1.0, 0),
                 0.8, np.array([1.0, 1.0, 1.0]), None)
        color, depth, sem, sil = composite_pixel_reference([splat], (0, 0))
        expected = 0.8 * np.exp(-0.5)
        assert sil == pytest.approx(expected, abs=1e-12)
        assert depth == pytest.approx(expected, abs=1e-12)

    def test_zero_splats_reference(self):
        color, depth, sem, sil = composite_pixel_reference([], (3, 3))
        assert sil == 0.0 and depth == 0.0
        np.testing.assert_array_equal(color, np.zeros(3))

    def test_render_matches_reference_random_scenes(self, rng, small_camera):
        for _ in range(5):
            m = random_map(rng, 48)
            pose = random_pose(rng)
            out = render(m, small_camera, pose, early_termination=False)
            ref = _reference_image(m, small_camera, pose)
            np.testing.assert_allclose(out.color, ref.color, atol=1e-5)
            np.testing.assert_allclose(out.depth, ref.depth, atol=1e-5)
            np.testing.assert_allclose(out.semantic, ref.semantic, atol=1e-5)
            np.testing.assert_allclose(out.silhouette, ref.silhouette, atol=1e-5)

    def test_early_termination_bounded(self, rng, small_camera):
        m = random_map(rng, 96, z_range=(0.8, 1.6))
        out_full = render(m, small_camera, PoseSE3.identity(), early_termination=False)
        out_et = render(m, small_camera, PoseSE3.identity(), early_termination=True)
        assert np.abs(out_full.color - out_et.color).max() < 1e-4
        assert np.abs(out_full.silhouette - out_et.silhouette).max() < 1e-4


class TestRenderProperties:
    def test_silhouette_in_unit_interval_and_below_one(self, rng, small_camera):
        m = random_map(rng, 64)
        out = render(m, small_camera, PoseSE3.identity())
        assert out.silhouette.min() >= 0.0
        assert out.silhouette.max() < 1.0  # alpha clamp keeps S_p strictly < 1

    def test_silhouette_monotone_in_map_growth(self, rng, small_camera):
        m = random_map(rng, 32)
        before = render(m, small_camera, PoseSE3.identity()).silhouette
        extra = random_map(rng, 16)
        m.append_arrays(extra.colors, extra.means, extra.log_scales,
                        extra.rotations, extra.opacity_logits,
                        extra.class_vecs)
        after = render(m, small_camera, PoseSE3.identity()).silhouette
        assert (after >= before - 1e-12).all()

    def test_storage_permutation_invariance(self, rng, small_camera):
        m = random_map(rng, 40)
        out = render(m, small_camera, PoseSE3.identity(), early_termination=False)
        perm = rng.permutation(len(m))
        m2 = GaussianMap(num_classes=m.num_classes)
        m2.append_arrays(m.colors[perm], m.means[perm], m.log_scales[perm],
                         m.rotations[perm], m.opacity_logits[perm],
                         m.class_vecs[perm])
        out2 = render(m2, small_camera, PoseSE3.identity(), early_termination=False)
        np.testing.assert_allclose(out.color, out2.color, atol=1e-6)
        np.testing.assert_allclose(out.silhouette, out2.silhouette, atol=1e-6)

    def test_contributor_list_alphas(self, rng, small_camera):
        m = random_map(rng, 24)
        out = render(m, small_camera, PoseSE3.identity(), retain=True,
                     early_termination=False)
        cons = out.contributors(10, 10)
        for idx, alpha in cons:
            assert 0 <= idx < len(m)
            assert ALPHA_SKIP <= alpha <= ALPHA_CLAMP
        # front-to-back silhouette from the listed alphas matches the image
        sil = 0.0
        T = 1.0
        for _, a in cons:
            sil += a * T
            T *= 1 - a
        assert sil == pytest.approx(out.silhouette[10, 10], abs=1e-9)
