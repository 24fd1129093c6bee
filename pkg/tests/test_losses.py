import numpy as np
import pytest

from splatmap.core import Frame, PoseSE3
from splatmap.losses import (
    LossWeights,
    loss_depth_l1,
    loss_l1,
    loss_merge,
    loss_opt,
    loss_rgb_mse,
    loss_semantic_ce,
    ssim,
)


def naive_ssim(x, y, win=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Direct sliding-window implementation (independent oracle)."""
    g = np.arange(win) - (win - 1) / 2
    w1 = np.exp(-g**2 / (2 * sigma**2))
    w1 /= w1.sum()
    w = np.outer(w1, w1)
    vals = []
    for ch in range(x.shape[2]):
        a = x[..., ch]
        b = y[..., ch]
        for i in range(x.shape[0] - win + 1):
            for j in range(x.shape[1] - win + 1):
                pa = a[i:i + win, j:j + win]
                pb = b[i:i + win, j:j + win]
                mx = (w * pa).sum()
                my = (w * pb).sum()
                vx = (w * pa * pa).sum() - mx**2
                vy = (w * pb * pb).sum() - my**2
                cxy = (w * pa * pb).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestRgbMse:
    def test_identical(self, rng):
        x = rng.uniform(0, 1, (6, 7, 3))
        assert loss_rgb_mse(x, x)[0] == 0.0

    def test_uniform_offset(self):
        gt = np.full((5, 5, 3), 0.25)
        assert loss_rgb_mse(gt + 0.5, gt)[0] == pytest.approx(0.25, abs=1e-15)

    def test_matches_naive_double_loop(self, rng):
        p = rng.uniform(0, 1, (5, 6, 3))
        q = rng.uniform(0, 1, (5, 6, 3))
        acc = 0.0
        for i in range(5):
            for j in range(6):
                for c in range(3):
                    acc += (p[i, j, c] - q[i, j, c])**2
        assert loss_rgb_mse(p, q)[0] == pytest.approx(acc / 90, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_rgb_mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_masked_pixels_are_inert(self, rng):
        p = rng.uniform(0, 1, (6, 6, 3))
        q = rng.uniform(0, 1, (6, 6, 3))
        mask = rng.uniform(size=(6, 6)) > 0.4
        v1, g1 = loss_rgb_mse(p, q, mask)
        p2 = p.copy()
        p2[~mask] = 99.0
        v2, g2 = loss_rgb_mse(p2, q, mask)
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestDepthL1:
    def test_identical(self, rng):
        d = rng.uniform(0.5, 3, (5, 5))
        assert loss_depth_l1(d, d)[0] == 0.0

    def test_uniform_offset(self):
        gt = np.full((5, 5), 2.0)
        assert loss_depth_l1(gt + 0.1, gt)[0] == pytest.approx(0.1, abs=1e-12)

    def test_invalid_gt_excluded(self, rng):
        gt = rng.uniform(1, 2, (4, 4))
        gt[0, 0] = 0.0
        pred = gt + 0.2
        pred[0, 0] = 55.0  # must not matter
        v, g = loss_depth_l1(pred, gt)
        assert v == pytest.approx(0.2, abs=1e-12)
        assert g[0, 0] == 0.0

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty mask"):
            loss_depth_l1(np.ones((3, 3)), np.zeros((3, 3)))

    def test_matches_naive(self, rng):
        p = rng.uniform(0, 3, (6, 5))
        q = rng.uniform(0, 3, (6, 5))
        q[rng.uniform(size=(6, 5)) < 0.3] = 0
        valid = q > 0
        naive = np.abs(p[valid] - q[valid]).sum() / valid.sum()
        assert loss_depth_l1(p, q)[0] == pytest.approx(naive, abs=1e-10)


class TestSemanticCE:
    def test_large_margin(self):
        logits = np.zeros((3, 3, 5))
        labels = np.full((3, 3), 2, dtype=np.uint8)
        logits[..., 2] = 20.0
        assert loss_semantic_ce(logits, labels)[0] < 1e-8

    def test_uniform_logits_ln_n(self):
        logits = np.zeros((4, 4, 20))
        labels = np.zeros((4, 4), dtype=np.uint8)
        assert loss_semantic_ce(logits, labels)[0] == pytest.approx(np.log(20),
                                                                    abs=1e-9)

    def test_matches_naive(self, rng):
        logits = rng.normal(size=(4, 5, 6))
        labels = rng.integers(0, 6, (4, 5)).astype(np.uint8)
        labels[1, 1] = 255
        acc = 0.0
        n = 0
        for i in range(4):
            for j in range(5):
                if labels[i, j] == 255:
                    continue
                e = np.exp(logits[i, j])
                acc += -np.log(e[labels[i, j]] / e.sum())
                n += 1
        assert loss_semantic_ce(logits, labels)[0] == pytest.approx(acc / n, abs=1e-8)

    def test_all_unlabeled(self):
        with pytest.raises(ValueError, match="empty mask"):
            loss_semantic_ce(np.zeros((2, 2, 3)), np.full((2, 2), 255, np.uint8))

    def test_gradient_fd(self, rng):
        logits = rng.normal(size=(4, 4, 5))
        labels = rng.integers(0, 5, (4, 4)).astype(np.uint8)
        _, g = loss_semantic_ce(logits, labels)
        h = 1e-6
        for _ in range(10):
            i, j, c = rng.integers(4), rng.integers(4), rng.integers(5)
            up = logits.copy()
            up[i, j, c] += h
            dn = logits.copy()
            dn[i, j, c] -= h
            fd = (loss_semantic_ce(up, labels)[0]
                  - loss_semantic_ce(dn, labels)[0]) / (2 * h)
            assert g[i, j, c] == pytest.approx(fd, abs=1e-6)


class TestSsim:
    def test_identical_is_one(self, rng):
        x = rng.uniform(0, 1, (14, 15, 3))
        assert ssim(x, x)[0] == pytest.approx(1.0, abs=1e-9)

    def test_constant_images_identical_statistics(self):
        gt = np.full((12, 12, 3), 0.5)
        assert ssim(1 - gt, gt)[0] == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self, rng):
        x = rng.uniform(0, 1, (13, 13, 3))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert ssim(x, y)[0] == pytest.approx(ssim(y, x)[0], abs=1e-9)

    def test_never_exceeds_one(self, rng):
        for _ in range(5):
            x = rng.uniform(0, 1, (12, 12, 3))
            y = rng.uniform(0, 1, (12, 12, 3))
            assert ssim(x, y)[0] <= 1.0

    def test_matches_naive_sliding_window(self, rng):
        x = rng.uniform(0, 1, (14, 13, 3))
        y = np.clip(0.5 + 2.0 * (x - 0.5) + rng.normal(0, 0.05, x.shape), 0, 1)
        assert ssim(x, y)[0] == pytest.approx(naive_ssim(x, y), abs=1e-7)

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))

    def test_gradient_fd(self, rng):
        x = rng.uniform(0.2, 0.8, (12, 12, 3))
        y = np.clip(x + rng.normal(0, 0.08, x.shape), 0, 1)
        _, g = ssim(x, y)
        h = 1e-6
        for _ in range(8):
            i, j, c = rng.integers(12), rng.integers(12), rng.integers(3)
            up = x.copy()
            up[i, j, c] += h
            dn = x.copy()
            dn[i, j, c] -= h
            fd = (ssim(up, y)[0] - ssim(dn, y)[0]) / (2 * h)
            assert g[i, j, c] == pytest.approx(fd, abs=1e-6)


def _view(rng, h=12, w=12, n=4, perfect=False):
    from splatmap.renderer import RenderOutput
    rgb = rng.uniform(0, 1, (h, w, 3))
    depth = rng.uniform(0.5, 2.0, (h, w))
    sem = rng.integers(0, n, (h, w)).astype(np.uint8)
    frame = Frame(0, 0.0, rgb, depth, sem, pose=PoseSE3.identity())
    if perfect:
        logits = np.zeros((h, w, n))
        rows, cols = np.mgrid[0:h, 0:w]
        logits[rows, cols, sem] = 30.0
        out = RenderOutput(rgb.copy(), depth.copy(), logits, np.ones((h, w)))
    else:
        out = RenderOutput(rng.uniform(0, 1, (h, w, 3)),
                           rng.uniform(0.5, 2.0, (h, w)),
                           rng.normal(size=(h, w, n)), np.ones((h, w)))
    return out, frame


class TestComposites:
    def test_merge_perfect_views_zero(self, rng):
        views = [_view(rng, perfect=True) for _ in range(3)]
        v, _ = loss_merge(views)
        assert v == pytest.approx(0.0, abs=1e-10)

    def test_merge_rgb_isolation(self, rng):
        out, frame = _view(rng, perfect=True)
        out.color = np.clip(out.color + 0.1, 0, 1.5)
        expect = loss_rgb_mse(out.color, frame.rgb)[0]
        v, _ = loss_merge([(out, frame)])
        assert v == pytest.approx(expect, abs=1e-10)

    def test_merge_equals_hand_combination(self, rng):
        views = [_view(rng) for _ in range(3)]
        w = LossWeights()
        total = 0.0
        for out, frame in views:
            total += (w.lambda_rgb * loss_rgb_mse(out.color, frame.rgb)[0]
                      + w.lambda_d * loss_depth_l1(out.depth, frame.depth)[0]
                      + w.lambda_sem * loss_semantic_ce(out.semantic, frame.semantic)[0])
        v, _ = loss_merge(views, w)
        assert v == pytest.approx(total / 3, abs=1e-12)

    def test_opt_perfect_views_zero(self, rng):
        views = [_view(rng, perfect=True) for _ in range(2)]
        v, _ = loss_opt(views)
        assert v == pytest.approx(0.0, abs=1e-10)

    def test_opt_equals_hand_combination(self, rng):
        views = [_view(rng) for _ in range(2)]
        w = LossWeights()
        total = 0.0
        for out, frame in views:
            l1 = loss_l1(out.color, frame.rgb)[0]
            s = ssim(out.color, frame.rgb)[0]
            d = loss_depth_l1(out.depth, frame.depth)[0]
            total += (w.lambda_rgb * (0.8 * l1 + 0.2 * (1 - s)) + w.lambda_d * d)
        v, _ = loss_opt(views, w)
        assert v == pytest.approx(total / 2, abs=1e-12)

    def test_opt_constant_offset_closed_form(self):
        """Uniform +0.1 color offset on constant images, no depth error."""
        from splatmap.renderer import RenderOutput
        h = w = 12
        gt = np.full((h, w, 3), 0.5)
        depth = np.full((h, w), 1.0)
        frame = Frame(0, 0.0, gt, depth, np.full((h, w), 255, np.uint8),
                      pose=PoseSE3.identity())
        out = RenderOutput(gt + 0.1, depth.copy(), None, np.ones((h, w)))
        c1, c2 = 0.01**2, 0.03**2
        ssim_const = ((2 * 0.5 * 0.6 + c1) * c2) / ((0.25 + 0.36 + c1) * c2)
        expect = 0.8 * 0.1 + 0.2 * (1 - ssim_const)
        v, _ = loss_opt([(out, frame)])
        assert v == pytest.approx(expect, abs=1e-12)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_rgb=-0.1)

    def test_nonnegative_and_zero_iff_perfect(self, rng):
        views = [_view(rng) for _ in range(2)]
        assert loss_merge(views)[0] > 0
        assert loss_opt(views)[0] > 0
