"""Map lifecycle: decode one Gaussian per pixel block from an RGB-D frame,
gate insertion by the rendered silhouette, refine with an update-count gate,
prune transparent Gaussians, and reconcile the map after pose corrections
with a single guarded gradient step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    CameraIntrinsics,
    Frame,
    Gaussian,
    GaussianMap,
    PoseSE3,
    backproject,
    logit,
    quaternion_angle,
)
from .losses import LossWeights, loss_merge, loss_opt
from .renderer import render, render_backward

INITIAL_OPACITY = 0.7
MAX_STEP_HALVINGS = 12

# Relative step gains per parameter block.  Gradients of the mean-normalized
# losses differ by orders of magnitude between blocks, so steps are scaled by
# each block's mean absolute gradient; refine_step then reads as the typical
# per-parameter movement, and opacity logits (a long path from 0.7 to nearly
# opaque) move faster than colors, mirroring per-attribute learning rates in
# splatting practice.
BLOCK_GAIN = {
    "colors": 1.0,
    "means": 1.0,
    "log_scales": 1.0,
    "rotations": 0.5,
    "opacity_logits": 4.0,
}


@dataclass
class MapperConfig:
    stride: int = 4                      # one Gaussian per stride x stride block
    silhouette_threshold: float = 0.5
    prune_opacity: float = 0.005
    max_updates: int = 8                 # per-Gaussian refinement budget
    refine_step: float = 0.002           # typical per-parameter movement per step
    topk_frames: int = 8
    pose_corr_trans_thresh: float = 0.01     # meters
    pose_corr_rot_thresh: float = 0.5        # degrees
    refine_keyframes: int = 3            # recent keyframes considered per refine
    refine_overlap: float = 0.2          # min mean silhouette for a supervision view

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not (0 <= self.silhouette_threshold <= 1):
            raise ValueError("silhouette_threshold out of range")
        if not (0 < self.prune_opacity < 1):
            raise ValueError("prune_opacity out of range")
        if self.max_updates < 0 or self.topk_frames < 1:
            raise ValueError("bad gating parameters")


class OffsetProvider:
    """Pluggable decode-offset source for predicted Gaussians.

    Maps (frame, block-center pixels, depths) to per-Gaussian offsets
    (dx, dy) in pixels, dd in meters and dcolor in RGB.  The default returns
    zeros; a learned predictor can be slotted in without touching the
    lifecycle.  Contract: |dx|, |dy| <= stride and |dd| <= 0.1 * d.
    """

    def offsets(self, frame: Frame, xs, ys, ds):
        n = len(xs)
        return np.zeros(n), np.zeros(n), np.zeros(n), np.zeros((n, 3))


ZERO_OFFSETS = OffsetProvider()


@dataclass
class PredictedGaussians:
    """Per-block decoded Gaussians plus their source pixels (for gating)."""

    colors: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    class_vecs: np.ndarray
    source_x: np.ndarray
    source_y: np.ndarray
    epoch: int

    def __len__(self):
        return self.means.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.colors[i], self.means[i], self.log_scales[i],
                        self.rotations[i], self.opacity_logits[i],
                        self.class_vecs[i], update_count=0, epoch=self.epoch)

    def __iter__(self):
        return (self.gaussian(i) for i in range(len(self)))


def _block_centers(width, height, stride):
    xs = np.minimum(np.arange((width + stride - 1) // stride) * stride + stride // 2,
                    width - 1)
    ys = np.minimum(np.arange((height + stride - 1) // stride) * stride + stride // 2,
                    height - 1)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def _class_vectors(frame: Frame, xs, ys, num_classes: int):
    labels = frame.semantic[ys, xs]
    v = np.full((len(xs), num_classes), 1.0 / num_classes)
    labeled = labels != 255
    v[labeled] = 0.0
    v[np.nonzero(labeled)[0], labels[labeled].astype(np.int64)] = 1.0
    return v


def predict_gaussians(frame: Frame, K: CameraIntrinsics, pose: PoseSE3,
                      cfg: MapperConfig, offsets: OffsetProvider = ZERO_OFFSETS,
                      num_classes: int = 20) -> PredictedGaussians:
    """Decode one Gaussian per stride-block whose center pixel has valid depth.

    Color = pixel RGB plus the color offset; position = offset-shifted pixel
    and depth backprojected through (K, pose); isotropic scale covers the
    block footprint at that depth; opacity starts at 0.7.  Class vectors are
    one-hot for labeled pixels and uniform for unlabeled ones.
    """
    if pose is None:
        raise ValueError("frame pose required for prediction")
    h, w = frame.size
    xs, ys = _block_centers(w, h, cfg.stride)
    d = frame.depth[ys, xs]
    ok = d > 0
    xs, ys, d = xs[ok], ys[ok], d[ok]
    dx, dy, dd, dc = offsets.offsets(frame, xs, ys, d)
    dx = np.clip(dx, -cfg.stride, cfg.stride)
    dy = np.clip(dy, -cfg.stride, cfg.stride)
    dd = np.clip(dd, -0.1 * d, 0.1 * d)
    mu = backproject(xs + dx, ys + dy, d + dd, K, pose) if len(xs) else np.zeros((0, 3))
    colors = np.clip(frame.rgb[ys, xs] + dc, 0.0, 1.0)
    scale = (d + dd) * cfg.stride / ((K.fx + K.fy) / 2.0)
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1) if len(xs) else np.zeros((0, 3))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (len(xs), 1))
    opacity_logits = np.full(len(xs), float(logit(INITIAL_OPACITY)))
    return PredictedGaussians(
        colors=colors.reshape(-1, 3),
        means=mu.reshape(-1, 3),
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity_logits,
        class_vecs=_class_vectors(frame, xs, ys, num_classes),
        source_x=xs,
        source_y=ys,
        epoch=frame.index,
    )


def covisibility_mask(map: GaussianMap, K: CameraIntrinsics, pose: PoseSE3,
                      cfg: MapperConfig):
    """Boolean H x W mask, true where the rendered silhouette is below the
    coverage threshold (i.e. where new Gaussians may be inserted)."""
    out = render(map, K, pose, channels={"silhouette"})
    return out.silhouette < cfg.silhouette_threshold


def insert_new(map: GaussianMap, predicted: PredictedGaussians, mask) -> int:
    """Append predicted Gaussians whose source pixel is uncovered; returns
    the inserted count."""
    if len(predicted) == 0:
        return 0
    sel = np.asarray(mask, dtype=bool)[predicted.source_y, predicted.source_x]
    n = int(sel.sum())
    if n == 0:
        return 0
    map.append_arrays(
        predicted.colors[sel], predicted.means[sel], predicted.log_scales[sel],
        predicted.rotations[sel], predicted.opacity_logits[sel],
        predicted.class_vecs[sel], epoch=predicted.epoch,
    )
    return n


def prune(map: GaussianMap, cfg: MapperConfig) -> int:
    """Remove Gaussians with opacity strictly below the prune threshold."""
    keep = map.opacities >= cfg.prune_opacity
    removed = int((~keep).sum())
    if removed:
        map.keep(keep)
    return removed


def _accumulate_param_grads(map, K, views, view_grads, outputs):
    """Sum renderer backward passes over supervision views."""
    G = len(map)
    total = {
        "dcolor": np.zeros((G, 3)), "dmu": np.zeros((G, 3)),
        "dlog_scale": np.zeros((G, 3)), "drotation": np.zeros((G, 4)),
        "dopacity_logit": np.zeros(G), "touched": np.zeros(G, dtype=bool),
    }
    for (out, frame), og in zip(outputs, view_grads):
        g = render_backward(map, K, frame.pose, og, out)
        for k in ("dcolor", "dmu", "dlog_scale", "drotation", "dopacity_logit"):
            total[k] += g[k]
        total["touched"] |= g["touched"]
    return total


def _guarded_step(map: GaussianMap, eval_loss, base_step, updates):
    """One gradient step with per-block normalization and a halving guard.

    Each block's gradient is scaled by its mean absolute value over the
    updated rows, so `base_step` is the typical per-parameter movement.  The
    step is halved until the loss strictly decreases; `updates` maps array
    name -> (grad, row mask).  Returns (accepted, step, loss_before,
    loss_after)."""
    loss_before = eval_loss(map)
    directions = {}
    for name, (grad, rows) in updates.items():
        mag = np.abs(grad[rows])
        scale = BLOCK_GAIN[name] / (mag.mean() + 1e-30) if mag.size else 0.0
        directions[name] = (grad * scale, rows)
    step = base_step
    for _ in range(MAX_STEP_HALVINGS):
        candidate = map.copy()
        new = {}
        for name, (direction, rows) in directions.items():
            arr = getattr(candidate, name).copy()
            arr[rows] = arr[rows] - step * direction[rows]
            new[name] = arr
        if "colors" in new:
            new["colors"] = np.clip(new["colors"], 0.0, 1.0)
        candidate.set_parameters(**new)
        loss_after = eval_loss(candidate)
        if loss_after < loss_before:
            map.set_parameters(**new)
            return True, step, loss_before, loss_after
        step *= 0.5
    return False, 0.0, loss_before, loss_before


def refine(map: GaussianMap, views: list[Frame], K: CameraIntrinsics,
           cfg: MapperConfig, weights: LossWeights = LossWeights()):
    """One gated gradient step of the merge loss over the supervision views.

    Updates color, log-scale, rotation and opacity of every contributing
    Gaussian still under the update budget; position and class vector stay
    fixed.  Update counts increment for all gated-in contributors even when
    the gradient happens to be zero.
    """
    for f in views:
        if f.pose is None:
            raise ValueError("supervision view without pose")
    if len(map) == 0:
        return {"updated": 0, "step": 0.0, "loss_before": 0.0, "loss_after": 0.0}

    def forward(m):
        return [(render(m, K, f.pose, channels={"color", "depth", "semantic"},
                        retain=True), f) for f in views]

    outputs = forward(map)
    loss_before, view_grads = loss_merge(outputs, weights)
    grads = _accumulate_param_grads(map, K, views, view_grads, outputs)
    gate = grads["touched"] & (map.update_counts < cfg.max_updates)

    def eval_loss(m):
        return loss_merge(forward(m), weights)[0]

    accepted, step, _, loss_after = _guarded_step(
        map, eval_loss, cfg.refine_step,
        {
            "colors": (grads["dcolor"], gate),
            "log_scales": (grads["dlog_scale"], gate),
            "rotations": (grads["drotation"], gate),
            "opacity_logits": (grads["dopacity_logit"], gate),
        },
    ) if gate.any() else (False, 0.0, loss_before, loss_before)

    map.update_counts = map.update_counts + gate.astype(np.int64)
    return {
        "updated": int(gate.sum()),
        "step": step if accepted else 0.0,
        "loss_before": loss_before,
        "loss_after": loss_after if accepted else loss_before,
    }


def one_iteration_optimize(map: GaussianMap, corrected_frames, K: CameraIntrinsics,
                           cfg: MapperConfig, weights: LossWeights = LossWeights()):
    """Single guarded gradient step reconciling the map with corrected poses.

    corrected_frames: list of (Frame, old_pose, new_pose); frames are ranked
    by pose-change magnitude (translation [m] + rotation [rad]) and the top-k
    are rendered under their new poses.  Updates position, log-scale,
    rotation and opacity of all Gaussians (no update-count gate); color and
    class vectors stay untouched.
    """
    rot_thresh = np.deg2rad(cfg.pose_corr_rot_thresh)
    ranked = []
    for frame, old_pose, new_pose in corrected_frames:
        dt = float(np.linalg.norm(old_pose.t - new_pose.t))
        dr = quaternion_angle(old_pose.q, new_pose.q)
        if dt > cfg.pose_corr_trans_thresh or dr > rot_thresh:
            ranked.append((dt + dr, frame, new_pose))
    if not ranked or len(map) == 0:
        return {"frames": [], "step": 0.0, "loss_before": 0.0,
                "loss_after": 0.0, "noop": True}
    ranked.sort(key=lambda r: -r[0])
    selected = ranked[: cfg.topk_frames]
    views = []
    for _, frame, new_pose in selected:
        f = Frame(frame.index, frame.timestamp, frame.rgb, frame.depth,
                  frame.semantic, pose=new_pose, is_keyframe=frame.is_keyframe)
        views.append(f)

    def forward(m):
        return [(render(m, K, f.pose, channels={"color", "depth"}, retain=True), f)
                for f in views]

    outputs = forward(map)
    loss_before, view_grads = loss_opt(outputs, weights)
    grads = _accumulate_param_grads(map, K, views, view_grads, outputs)

    all_rows = np.ones(len(map), dtype=bool)

    def eval_loss(m):
        return loss_opt(forward(m), weights)[0]

    accepted, step, _, loss_after = _guarded_step(
        map, eval_loss, cfg.refine_step,
        {
            "means": (grads["dmu"], all_rows),
            "log_scales": (grads["dlog_scale"], all_rows),
            "rotations": (grads["drotation"], all_rows),
            "opacity_logits": (grads["dopacity_logit"], all_rows),
        },
    )
    return {
        "frames": [f.index for f in views],
        "step": step,
        "loss_before": loss_before,
        "loss_after": loss_after,
        "noop": False,
    }


def select_supervision_views(map: GaussianMap, frame: Frame, keyframes,
                             K: CameraIntrinsics, cfg: MapperConfig):
    """Current frame plus up to `refine_keyframes` recent keyframes whose
    rendered silhouette overlap clears the covisibility floor."""
    views = [frame]
    taken = 0
    for kf in reversed(keyframes):
        if taken >= cfg.refine_keyframes:
            break
        if kf.index == frame.index or kf.pose is None:
            continue
        sil = render(map, K, kf.pose, channels={"silhouette"}).silhouette
        if float(sil.mean()) > cfg.refine_overlap:
            views.append(kf)
            taken += 1
    return views


def process_frame(map: GaussianMap, frame: Frame, keyframes,
                  K: CameraIntrinsics, cfg: MapperConfig,
                  offsets: OffsetProvider = ZERO_OFFSETS):
    """Full per-frame lifecycle: predict -> covisibility gate -> insert ->
    refine -> prune.  Returns a per-frame report."""
    predicted = predict_gaussians(frame, K, frame.pose, cfg, offsets,
                                  num_classes=map.num_classes)
    mask = covisibility_mask(map, K, frame.pose, cfg)
    inserted = insert_new(map, predicted, mask)
    views = select_supervision_views(map, frame, keyframes, K, cfg)
    refine_report = refine(map, views, K, cfg)
    removed = prune(map, cfg)
    return {
        "predicted": len(predicted),
        "inserted": inserted,
        "pruned": removed,
        "refined": refine_report["updated"],
        "refine_loss": refine_report["loss_after"],
        "supervision_views": [v.index for v in views],
        "map_size": len(map),
    }
