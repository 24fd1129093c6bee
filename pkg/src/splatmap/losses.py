"""Scalar objectives over rendered views, each returning its per-pixel
gradient so the rasterizer backward pass can chain to Gaussian parameters.

Two composites are used by the map lifecycle: the merge loss (MSE color +
L1 depth + cross-entropy semantics, weights 1.0/1.0/0.1) driving refinement,
and the correction loss (L1+SSIM color mixed 0.8/0.2 plus L1 depth, no
semantics) driving the one-iteration optimization after pose updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .renderer import OutputGrads

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_d: float = 1.0
    lambda_sem: float = 0.1
    lambda_ssim_mix: float = 0.2

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_d", "lambda_sem", "lambda_ssim_mix"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def loss_rgb_mse(pred, gt, mask=None):
    """Mean squared error over valid pixel-channels; returns (value, dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt)
    err = pred - gt
    if mask is not None:
        m3 = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], err.shape)
        count = int(m3.sum())
        if count == 0:
            raise ValueError("empty mask")
        err = np.where(m3, err, 0.0)
    else:
        count = err.size
    value = float((err**2).sum() / count)
    return value, 2.0 * err / count


def loss_l1(pred, gt, mask=None):
    """Mean absolute error over valid entries; subgradient 0 at exact ties."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt)
    err = pred - gt
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != err.shape:
            m = np.broadcast_to(m[..., None], err.shape)
        count = int(m.sum())
        if count == 0:
            raise ValueError("empty mask")
        err = np.where(m, err, 0.0)
    else:
        count = err.size
    value = float(np.abs(err).sum() / count)
    return value, np.sign(err) / count


def loss_depth_l1(pred, gt, mask=None):
    """L1 depth loss in meters over pixels with a valid (nonzero) reference."""
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    return loss_l1(pred, gt, valid)


def loss_semantic_ce(pred_logits, gt_labels):
    """Mean cross-entropy of composited class scores against labeled pixels.

    Labels equal to 255 are unlabeled and excluded.  Returns (value, dlogits)
    with dlogits = (softmax - onehot) / count on labeled pixels.
    """
    logits = np.asarray(pred_logits, dtype=np.float64)
    labels = np.asarray(gt_labels)
    if logits.shape[:2] != labels.shape:
        raise ValueError("shape mismatch between logits and labels")
    n = logits.shape[2]
    valid = labels != 255
    count = int(valid.sum())
    if count == 0:
        raise ValueError("empty mask")
    shifted = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    softmax = e / e.sum(axis=2, keepdims=True)
    lab = np.where(valid, labels, 0).astype(np.int64)
    logp = shifted - np.log(e.sum(axis=2, keepdims=True))
    picked = np.take_along_axis(logp, lab[..., None], axis=2)[..., 0]
    value = float(-(picked * valid).sum() / count)
    grad = softmax.copy()
    rows, cols = np.nonzero(valid)
    grad[rows, cols, lab[rows, cols]] -= 1.0
    grad[~valid] = 0.0
    return value, grad / count


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img, w):
    """Separable 'valid'-mode correlation along the first two axes."""
    k = len(w)
    h = img.shape[0] - k + 1
    out0 = np.zeros((h,) + img.shape[1:])
    for i in range(k):
        out0 += w[i] * img[i:i + h]
    wid = img.shape[1] - k + 1
    out = np.zeros((h, wid) + img.shape[2:])
    for i in range(k):
        out += w[i] * out0[:, i:i + wid]
    return out


def _filter_valid_adjoint(g, w, shape):
    """Adjoint of _filter_valid: scatter window gradients back to pixels."""
    k = len(w)
    h, wid = shape[0], shape[1]
    out0 = np.zeros((g.shape[0], wid) + g.shape[2:])
    for i in range(k):
        out0[:, i:i + g.shape[1]] += w[i] * g
    out = np.zeros(shape)
    for i in range(k):
        out[i:i + g.shape[0]] += w[i] * out0
    return out


def ssim(pred, gt):
    """Mean SSIM over fully-contained 11x11 Gaussian windows, per channel.

    Returns (value, dpred): the analytic gradient of the mean SSIM with
    respect to the predicted image.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt)
    if pred.ndim == 2:
        v, g = ssim(pred[..., None], gt[..., None])
        return v, g[..., 0]
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise ValueError("image smaller than SSIM window")
    w = _gaussian_window()
    x, y = pred, gt
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    x2 = _filter_valid(x * x, w)
    y2 = _filter_valid(y * y, w)
    xy = _filter_valid(x * y, w)
    var_x = x2 - mu_x**2
    var_y = y2 - mu_y**2
    cov = xy - mu_x * mu_y
    A = 2 * mu_x * mu_y + SSIM_C1
    B = 2 * cov + SSIM_C2
    C = mu_x**2 + mu_y**2 + SSIM_C1
    D = var_x + var_y + SSIM_C2
    S = (A * B) / (C * D)
    value = float(S.mean())

    npos = S.size
    dS = 1.0 / npos  # d(mean)/dS at every window position and channel
    # partials of S at fixed window statistics
    dmu_x = dS * (2 * mu_y * B / (C * D) - 2 * mu_x * A * B / (C**2 * D))
    dvar_x = dS * (-A * B / (C * D**2))
    dcov = dS * (2 * A / (C * D))
    # var/cov are built from filtered raw moments; fold their mu_x dependence
    dmu_x = dmu_x - 2 * mu_x * dvar_x - mu_y * dcov
    dx2 = dvar_x
    dxy = dcov
    grad = _filter_valid_adjoint(dmu_x, w, pred.shape)
    grad += _filter_valid_adjoint(dx2, w, pred.shape) * (2 * x)
    grad += _filter_valid_adjoint(dxy, w, pred.shape) * y
    return value, grad


def loss_merge(views, weights: LossWeights = LossWeights()):
    """Refinement objective averaged over supervision views.

    views: list of (RenderOutput, Frame).  Returns (value, [OutputGrads]).
    """
    if not views:
        raise ValueError("no views")
    m = len(views)
    total = 0.0
    grads = []
    for out, frame in views:
        v_rgb, g_rgb = loss_rgb_mse(out.color, frame.rgb)
        total += weights.lambda_rgb * v_rgb
        og = OutputGrads(color=weights.lambda_rgb * g_rgb / m)
        # views without any valid depth or any labeled pixel simply do not
        # contribute those terms (e.g. datasets shipping no labels)
        if (np.asarray(frame.depth) > 0).any():
            v_d, g_d = loss_depth_l1(out.depth, frame.depth)
            total += weights.lambda_d * v_d
            og.depth = weights.lambda_d * g_d / m
        if (np.asarray(frame.semantic) != 255).any():
            v_sem, g_sem = loss_semantic_ce(out.semantic, frame.semantic)
            total += weights.lambda_sem * v_sem
            og.semantic = weights.lambda_sem * g_sem / m
        grads.append(og)
    return total / m, grads


def loss_opt(views, weights: LossWeights = LossWeights()):
    """Pose-correction objective: L1+SSIM color mix plus L1 depth, averaged
    over the selected views; semantics intentionally omitted.

    views: list of (RenderOutput, Frame).  Returns (value, [OutputGrads]).
    """
    if not views:
        raise ValueError("no views")
    m = len(views)
    lam = weights.lambda_ssim_mix
    total = 0.0
    grads = []
    for out, frame in views:
        v_l1, g_l1 = loss_l1(out.color, frame.rgb)
        v_ssim, g_ssim = ssim(out.color, frame.rgb)
        total += weights.lambda_rgb * ((1 - lam) * v_l1 + lam * (1 - v_ssim))
        og = OutputGrads(
            color=weights.lambda_rgb * ((1 - lam) * g_l1 - lam * g_ssim) / m)
        if (np.asarray(frame.depth) > 0).any():
            v_d, g_d = loss_depth_l1(out.depth, frame.depth)
            total += weights.lambda_d * v_d
            og.depth = weights.lambda_d * g_d / m
        grads.append(og)
    return total / m, grads
