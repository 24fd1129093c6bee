"""Quantitative evaluation: PSNR, SSIM, depth L1 [cm], 2D mIoU and ATE RMSE.

Trajectory error follows the RGB-D SLAM convention: poses are associated by
nearest timestamp (20 ms window), rigidly aligned (closed-form, scale fixed
to 1) and the RMSE of translation residuals is reported in centimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import ssim as _ssim_with_grad
from .tracker import Trajectory

ASSOCIATION_WINDOW = 0.02  # seconds


def psnr(pred, gt) -> float:
    """10*log10(1/MSE) for images in [0, 1]; inf when the images match."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim_index(pred, gt) -> float:
    """Mean SSIM (11x11 Gaussian window), value only."""
    return _ssim_with_grad(pred, gt)[0]


def depth_l1_cm(pred, gt, mask=None) -> float:
    """Mean absolute depth error in centimeters over valid (nonzero) pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("empty mask")
    return float(np.abs(pred[valid] - gt[valid]).mean() * 100.0)


def miou_2d(pred_labels, gt_labels, num_classes: int) -> float:
    """Mean per-class IoU in percent from a confusion matrix.

    Pixels labeled 255 on either side are ignored; classes absent from both
    prediction and ground truth are excluded from the mean.
    """
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    keep = (gt != 255) & (pred != 255)
    pred = pred[keep].astype(np.int64)
    gt = gt[keep].astype(np.int64)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (gt, pred), 1)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    present = union > 0
    if not present.any():
        return 0.0
    iou = inter[present] / union[present]
    return float(iou.mean() * 100.0)


def associate_by_timestamp(ts_a, ts_b, window: float = ASSOCIATION_WINDOW):
    """Indices (ia, ib) of nearest-timestamp pairs within the window."""
    ts_a = np.asarray(ts_a, dtype=np.float64)
    ts_b = np.asarray(ts_b, dtype=np.float64)
    pairs = []
    for i, t in enumerate(ts_a):
        j = int(np.argmin(np.abs(ts_b - t))) if len(ts_b) else -1
        if j >= 0 and abs(ts_b[j] - t) <= window:
            pairs.append((i, j))
    return pairs


def rigid_align(src, dst):
    """Closed-form rigid (R, t) minimizing ||dst - (R src + t)||^2, scale 1."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    S = np.diag([1.0, 1.0, d])
    R = Vt.T @ S @ U.T
    t = cd - R @ cs
    return R, t


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    """Absolute trajectory error RMSE in centimeters after rigid alignment."""
    pairs = associate_by_timestamp(est.timestamps, gt.timestamps)
    if len(pairs) < 3:
        raise ValueError("fewer than 3 associated pose pairs")
    ia = [i for i, _ in pairs]
    ib = [j for _, j in pairs]
    p_est = est.positions()[ia]
    p_gt = gt.positions()[ib]
    R, t = rigid_align(p_est, p_gt)
    res = p_gt - (p_est @ R.T + t)
    return float(np.sqrt((res**2).sum(axis=1).mean()) * 100.0)


@dataclass
class EvalReport:
    """Per-frame metric rows plus sequence-level summary values."""

    rows: list = field(default_factory=list)   # dicts: frame, psnr, ssim, depth_l1_cm, miou
    ate_rmse_cm: float | None = None
    gaussian_count: int = 0

    def add_frame(self, frame_index, psnr_db, ssim_val, depth_cm, miou):
        self.rows.append({
            "frame": int(frame_index),
            "psnr": float(psnr_db),
            "ssim": float(ssim_val),
            "depth_l1_cm": float(depth_cm),
            "miou": float(miou),
        })

    def _mean(self, key):
        vals = [r[key] for r in self.rows if np.isfinite(r[key])]
        if not vals:
            return float("inf") if self.rows else 0.0
        return float(np.mean(vals))

    @property
    def averages(self):
        return {
            "psnr": self._mean("psnr"),
            "ssim": self._mean("ssim"),
            "depth_l1_cm": self._mean("depth_l1_cm"),
            "miou": self._mean("miou"),
        }

    def to_csv(self) -> str:
        lines = ["frame,psnr_db,ssim,depth_l1_cm,miou_pct"]
        for r in self.rows:
            lines.append(f"{r['frame']},{r['psnr']:.6f},{r['ssim']:.6f},"
                         f"{r['depth_l1_cm']:.6f},{r['miou']:.6f}")
        a = self.averages
        lines.append(f"mean,{a['psnr']:.6f},{a['ssim']:.6f},"
                     f"{a['depth_l1_cm']:.6f},{a['miou']:.6f}")
        if self.ate_rmse_cm is not None:
            lines.append(f"ate_rmse_cm,{self.ate_rmse_cm:.6f},,,")
        lines.append(f"gaussian_count,{self.gaussian_count},,,")
        return "\n".join(lines) + "\n"
