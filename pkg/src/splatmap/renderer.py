"""Tile-based rasterization of the Gaussian map and its analytic backward pass.

Forward: every Gaussian is projected to an image-space 2D Gaussian (EWA-style
first-order perspective Jacobian), binned into 16x16 pixel tiles by its
bounding rectangle, and alpha-composited front to back in globally sorted
camera-depth order (ties broken by insertion index).  Color, depth, per-class
semantic scores and the silhouette share one compositing pass.

Backward: given per-pixel gradients of a scalar loss with respect to any of
the rendered channels, returns gradients with respect to every Gaussian
parameter.  The pass recomputes per-tile visibilities from the retained
projection arrays instead of storing per-pixel weights.

Engine constants (declared here, not tuned per scene): alpha clamp 0.99,
contribution skip below 1/255, transmittance cutoff 1e-4, 0.3 px^2 low-pass
on the projected covariance diagonal, 0.01 m near plane.  The tile binning
radius is 3.5 sigma: beyond 3.33 sigma a contribution is provably below the
1/255 skip threshold, so binned and exhaustive compositing agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, Gaussian, GaussianMap, PoseSE3, sigmoid

TILE = 16
NEAR_PLANE = 0.01
NEAR_SIGMA_MARGIN = 3.0   # splat must lie wholly in front for EWA validity
LOWPASS = 0.3
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
BIN_SIGMA = 3.5

ALL_CHANNELS = frozenset({"color", "depth", "semantic", "silhouette"})


@dataclass
class Projected2D:
    mean2d: np.ndarray      # pixels
    cov2d: np.ndarray       # 2x2, pixels^2, low-pass already added
    depth_cam: float        # meters
    gaussian_index: int


def _rotation_matrices(q):
    """(G,4) unit quaternions (w,x,y,z) -> (G,3,3) rotation matrices."""
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
    return R


def _project_arrays(means, log_scales, rotations, K: CameraIntrinsics, cam_pose: PoseSE3):
    """Project all Gaussians; returns dict of arrays plus the keep mask."""
    G = means.shape[0]
    R_cw = cam_pose.rotation_matrix()
    W = R_cw.T                               # world -> camera rotation
    p_cam = (means - cam_pose.t) @ R_cw      # row-vector form of W @ (mu - t)

    z = p_cam[:, 2]
    # the affine projection is only trustworthy when the whole splat sits in
    # front of the camera; a grazing splat otherwise smears across the image
    sigma_max = np.exp(log_scales).max(axis=1)
    keep = z > NEAR_PLANE + NEAR_SIGMA_MARGIN * sigma_max
    # guard z for the culled rows so the arithmetic below stays finite
    zs = np.where(keep, z, 1.0)

    mean2d = np.empty((G, 2))
    mean2d[:, 0] = K.fx * p_cam[:, 0] / zs + K.cx
    mean2d[:, 1] = K.fy * p_cam[:, 1] / zs + K.cy

    J = np.zeros((G, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * p_cam[:, 0] / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * p_cam[:, 1] / zs**2

    qhat = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
    Rq = _rotation_matrices(qhat)
    e2s = np.exp(2.0 * log_scales)
    sigma3 = np.einsum("gij,gj,gkj->gik", Rq, e2s, Rq)

    M = np.einsum("gij,jk->gik", J, W)
    cov2d = np.einsum("gij,gjk,glk->gil", M, sigma3, M)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    rx = BIN_SIGMA * np.sqrt(cov2d[:, 0, 0])
    ry = BIN_SIGMA * np.sqrt(cov2d[:, 1, 1])
    keep &= mean2d[:, 0] + rx >= 0
    keep &= mean2d[:, 0] - rx <= K.width - 1
    keep &= mean2d[:, 1] + ry >= 0
    keep &= mean2d[:, 1] - ry <= K.height - 1

    return {
        "keep": keep,
        "p_cam": p_cam,
        "mean2d": mean2d,
        "cov2d": cov2d,
        "rx": rx,
        "ry": ry,
        "J": J,
        "M": M,
        "sigma3": sigma3,
        "Rq": Rq,
        "qhat": qhat,
        "e2s": e2s,
        "W": W,
    }


def project_gaussian(g: Gaussian, K: CameraIntrinsics, cam_pose: PoseSE3):
    """Project one Gaussian; None when behind the near plane or fully off-image."""
    out = _project_arrays(
        g.mu[None, :], g.log_scale[None, :], g.rotation[None, :], K, cam_pose
    )
    if not out["keep"][0]:
        return None
    return Projected2D(
        mean2d=out["mean2d"][0],
        cov2d=out["cov2d"][0],
        depth_cam=float(out["p_cam"][0, 2]),
        gaussian_index=0,
    )


def _invert_cov2d(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    return inv


@dataclass
class _ForwardContext:
    """Everything the backward pass needs to replay the forward compositing."""

    map_version: int
    K: CameraIntrinsics
    cam_pose: PoseSE3
    channels: frozenset
    early_termination: bool
    num_gaussians: int
    sorted_to_global: np.ndarray      # (S,) map from sorted slot to map index
    proj: dict                        # projection arrays for the sorted subset
    tile_gauss: np.ndarray            # (P,) sorted-slot index per (tile, gauss) pair
    tile_starts: np.ndarray           # (T+1,) run boundaries into tile_gauss
    tile_ids: np.ndarray              # (T,) flat tile id per run
    ntx: int
    nty: int


@dataclass
class RenderOutput:
    color: np.ndarray | None
    depth: np.ndarray | None
    semantic: np.ndarray | None
    silhouette: np.ndarray
    ctx: _ForwardContext | None = field(default=None, repr=False)

    def contributors(self, u: int, v: int):
        """(map index, alpha) pairs composited at pixel (u, v), front to back."""
        if self.ctx is None:
            raise ValueError("render was not retained")
        return _pixel_contributors(self.ctx, u, v)


def _tile_bins(mean2d, rx, ry, width, height):
    """Bin each projected Gaussian into the tiles its bounding box touches.

    Returns (tile_gauss, tile_starts, tile_ids, ntx, nty); tile_gauss holds
    sorted-slot indices grouped by tile, depth order preserved inside a group.
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    G = mean2d.shape[0]
    if G == 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), ntx, nty)
    tx0 = np.clip(np.floor((mean2d[:, 0] - rx) / TILE).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor((mean2d[:, 0] + rx) / TILE).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor((mean2d[:, 1] - ry) / TILE).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor((mean2d[:, 1] + ry) / TILE).astype(np.int64), 0, nty - 1)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    gauss = np.repeat(np.arange(G, dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    nxg = nx[gauss]
    tile = (ty0[gauss] + k // nxg) * ntx + (tx0[gauss] + k % nxg)
    order = np.lexsort((gauss, tile))
    tile = tile[order]
    gauss = gauss[order]
    boundaries = np.flatnonzero(np.diff(tile)) + 1
    tile_starts = np.concatenate([[0], boundaries, [total]]).astype(np.int64)
    tile_ids = tile[tile_starts[:-1]]
    return gauss, tile_starts, tile_ids, ntx, nty


def _tile_pixels(tile_id, ntx, width, height):
    ty, tx = divmod(int(tile_id), ntx)
    x0 = tx * TILE
    y0 = ty * TILE
    x1 = min(x0 + TILE, width)
    y1 = min(y0 + TILE, height)
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    px = np.repeat(xs[None, :], y1 - y0, axis=0).ravel()
    py = np.repeat(ys[:, None], x1 - x0, axis=1).ravel()
    return (y0, y1, x0, x1), px, py


def _tile_alphas(proj, slots, px, py, opacities):
    """alpha (G,P) at clamp/skip semantics, plus raw o*E and masks."""
    mean2d = proj["mean2d"][slots]
    A = proj["inv_cov2d"][slots]
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    quad = (A[:, 0, 0, None] * dx * dx
            + 2.0 * A[:, 0, 1, None] * dx * dy
            + A[:, 1, 1, None] * dy * dy)
    oE = opacities[slots, None] * np.exp(-0.5 * quad)
    skip = oE < ALPHA_SKIP
    clamped = oE > ALPHA_CLAMP
    alpha = np.where(skip, 0.0, np.minimum(oE, ALPHA_CLAMP))
    return alpha, oE, skip, clamped, dx, dy


def render(map: GaussianMap, K: CameraIntrinsics, cam_pose: PoseSE3,
           channels=ALL_CHANNELS, early_termination: bool = True,
           retain: bool = False) -> RenderOutput:
    """Rasterize the map into the requested channels.

    Compositing is front to back in increasing camera depth (ties by map
    index).  The silhouette is always produced.  With `retain`, enough state
    is kept for `render_backward`.
    """
    channels = frozenset(channels) | {"silhouette"}
    H, W = K.height, K.width
    N = map.num_classes
    color = np.zeros((H, W, 3)) if "color" in channels else None
    depth = np.zeros((H, W)) if "depth" in channels else None
    semantic = np.zeros((H, W, N)) if "semantic" in channels else None
    silhouette = np.zeros((H, W))

    if len(map) == 0:
        ctx = None
        if retain:
            ctx = _ForwardContext(map.version, K, cam_pose, channels, early_termination,
                                  0, np.zeros(0, dtype=np.int64),
                                  {}, np.zeros(0, dtype=np.int64),
                                  np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                  (W + TILE - 1) // TILE, (H + TILE - 1) // TILE)
        return RenderOutput(color, depth, semantic, silhouette, ctx)

    proj_all = _project_arrays(map.means, map.log_scales, map.rotations, K, cam_pose)
    keep = proj_all["keep"]
    global_idx = np.flatnonzero(keep)
    # global front-to-back order: camera depth, ties by insertion index
    order = np.lexsort((global_idx, proj_all["p_cam"][global_idx, 2]))
    sorted_to_global = global_idx[order]

    proj = {k: v[sorted_to_global] for k, v in proj_all.items()
            if k not in ("keep", "W")}
    proj["W"] = proj_all["W"]
    proj["inv_cov2d"] = _invert_cov2d(proj["cov2d"])

    opacities = sigmoid(map.opacity_logits[sorted_to_global])
    proj["opacity_sorted"] = opacities
    colors = map.colors[sorted_to_global]
    class_vecs = map.class_vecs[sorted_to_global] if "semantic" in channels else None
    depths_cam = proj["p_cam"][:, 2]

    tile_gauss, tile_starts, tile_ids, ntx, nty = _tile_bins(
        proj["mean2d"], proj["rx"], proj["ry"], W, H)

    for r in range(len(tile_ids)):
        slots = tile_gauss[tile_starts[r]:tile_starts[r + 1]]
        (y0, y1, x0, x1), px, py = _tile_pixels(tile_ids[r], ntx, W, H)
        alpha, _, _, _, _, _ = _tile_alphas(proj, slots, px, py, opacities)
        T_before = np.cumprod(1.0 - alpha, axis=0)
        T_before = np.vstack([np.ones((1, alpha.shape[1])), T_before[:-1]])
        if early_termination:
            alpha = np.where(T_before < TRANSMITTANCE_EPS, 0.0, alpha)
        w = alpha * T_before
        sh = (y1 - y0, x1 - x0)
        silhouette[y0:y1, x0:x1] += w.sum(axis=0).reshape(sh)
        if color is not None:
            color[y0:y1, x0:x1] += (w.T @ colors[slots]).reshape(sh + (3,))
        if depth is not None:
            depth[y0:y1, x0:x1] += (depths_cam[slots] @ w).reshape(sh)
        if semantic is not None:
            semantic[y0:y1, x0:x1] += (w.T @ class_vecs[slots]).reshape(sh + (N,))

    ctx = None
    if retain:
        ctx = _ForwardContext(map.version, K, cam_pose, channels, early_termination,
                              len(map), sorted_to_global, proj,
                              tile_gauss, tile_starts, tile_ids, ntx, nty)
    return RenderOutput(color, depth, semantic, silhouette, ctx)


def _pixel_contributors(ctx: _ForwardContext, u: int, v: int):
    if ctx.num_gaussians == 0 or len(ctx.sorted_to_global) == 0:
        return []
    tid = (v // TILE) * ctx.ntx + (u // TILE)
    r = int(np.searchsorted(ctx.tile_ids, tid))
    if r >= len(ctx.tile_ids) or ctx.tile_ids[r] != tid:
        return []
    slots = ctx.tile_gauss[ctx.tile_starts[r]:ctx.tile_starts[r + 1]]
    mean2d = ctx.proj["mean2d"][slots]
    A = ctx.proj["inv_cov2d"][slots]
    dx = u - mean2d[:, 0]
    dy = v - mean2d[:, 1]
    quad = A[:, 0, 0] * dx * dx + 2 * A[:, 0, 1] * dx * dy + A[:, 1, 1] * dy * dy
    oE = ctx.proj["opacity_sorted"][slots] * np.exp(-0.5 * quad)
    out = []
    T = 1.0
    for i, s in enumerate(slots):
        if oE[i] < ALPHA_SKIP:
            continue
        if ctx.early_termination and T < TRANSMITTANCE_EPS:
            break
        a = min(float(oE[i]), ALPHA_CLAMP)
        out.append((int(ctx.sorted_to_global[s]), a))
        T *= 1.0 - a
    return out


# ---------------------------------------------------------------------------
# reference compositor (oracle path: no tiles, no early termination)


class ReferenceCompositor:
    """Direct per-pixel evaluation of the compositing sums over pre-projected
    splats ordered by camera depth.  Oracle for the tiled renderer."""

    def __init__(self, splats):
        """splats: sequence of (Projected2D, opacity, color, class_vec)."""
        n = len(splats)
        self.n = n
        self.mean2d = np.array([s[0].mean2d for s in splats]).reshape(n, 2)
        cov = np.array([s[0].cov2d for s in splats]).reshape(n, 2, 2)
        self.inv = _invert_cov2d(cov) if n else np.zeros((0, 2, 2))
        self.depths = np.array([s[0].depth_cam for s in splats])
        self.opac = np.array([s[1] for s in splats])
        self.colors = np.array([s[2] for s in splats]).reshape(n, 3) if n else np.zeros((0, 3))
        vs = [s[3] for s in splats]
        self.classes = np.array(vs) if n and vs[0] is not None else None

    def pixel(self, u, v):
        if self.n == 0:
            return np.zeros(3), 0.0, None, 0.0
        dx = u - self.mean2d[:, 0]
        dy = v - self.mean2d[:, 1]
        quad = (self.inv[:, 0, 0] * dx * dx + 2 * self.inv[:, 0, 1] * dx * dy
                + self.inv[:, 1, 1] * dy * dy)
        oE = self.opac * np.exp(-0.5 * quad)
        alpha = np.where(oE < ALPHA_SKIP, 0.0, np.minimum(oE, ALPHA_CLAMP))
        T = np.cumprod(1.0 - alpha)
        T = np.concatenate([[1.0], T[:-1]])
        w = alpha * T
        color = w @ self.colors
        depth = float(w @ self.depths)
        sem = w @ self.classes if self.classes is not None else None
        return color, depth, sem, float(w.sum())


def composite_pixel_reference(splats, pixel):
    """One-pixel front-to-back compositing of depth-ordered projected splats.

    Returns (color, depth, semantic, silhouette); `splats` as for
    ReferenceCompositor.
    """
    return ReferenceCompositor(splats).pixel(pixel[0], pixel[1])


def render_reference(map: GaussianMap, K: CameraIntrinsics, cam_pose: PoseSE3,
                     semantic: bool = True) -> RenderOutput:
    """Full-image oracle render: per-pixel reference compositing of the map."""
    splats = []
    order = []
    for i in range(len(map)):
        p = project_gaussian(map.gaussian(i), K, cam_pose)
        if p is None:
            continue
        p.gaussian_index = i
        order.append((p.depth_cam, i))
        g = map.gaussian(i)
        splats.append((p, g.opacity, g.color, g.class_vec if semantic else None))
    idx = sorted(range(len(splats)), key=lambda k: order[k])
    ref = ReferenceCompositor([splats[k] for k in idx])
    H, W = K.height, K.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sem = np.zeros((H, W, map.num_classes)) if semantic else None
    sil = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            c, d, s, S = ref.pixel(u, v)
            color[v, u] = c
            depth[v, u] = d
            if semantic:
                sem[v, u] = s
            sil[v, u] = S
    return RenderOutput(color, depth, sem, sil)


# ---------------------------------------------------------------------------
# backward


@dataclass
class OutputGrads:
    """Per-pixel loss gradients for any subset of the rendered channels."""

    color: np.ndarray | None = None       # H x W x 3
    depth: np.ndarray | None = None       # H x W
    semantic: np.ndarray | None = None    # H x W x N
    silhouette: np.ndarray | None = None  # H x W


def render_backward(map: GaussianMap, K: CameraIntrinsics, cam_pose: PoseSE3,
                    output_grads: OutputGrads, forward: RenderOutput):
    """Gradients of a pixel loss w.r.t. every Gaussian parameter.

    `forward` must be a retained render of the same map/camera; the map must
    not have been mutated since.  Returns a dict with dcolor, dmu,
    dlog_scale, drotation, dopacity_logit, dclass_vec and a boolean `touched`
    mask of Gaussians that contributed to any pixel.
    """
    ctx = forward.ctx
    if ctx is None or ctx.map_version != map.version:
        raise ValueError("backward without matching forward")
    G = len(map)
    N = map.num_classes
    grads = {
        "dcolor": np.zeros((G, 3)),
        "dmu": np.zeros((G, 3)),
        "dlog_scale": np.zeros((G, 3)),
        "drotation": np.zeros((G, 4)),
        "dopacity_logit": np.zeros(G),
        "dclass_vec": np.zeros((G, N)),
        "touched": np.zeros(G, dtype=bool),
    }
    if ctx.num_gaussians == 0 or len(ctx.sorted_to_global) == 0:
        return grads

    proj = ctx.proj
    S = len(ctx.sorted_to_global)
    opacities = sigmoid(map.opacity_logits[ctx.sorted_to_global])
    colors = map.colors[ctx.sorted_to_global]
    class_vecs = map.class_vecs[ctx.sorted_to_global]
    depths_cam = proj["p_cam"][:, 2]

    dC = output_grads.color
    dD = output_grads.depth
    dS = output_grads.semantic
    dSil = output_grads.silhouette

    # accumulators over sorted slots
    acc_do = np.zeros(S)
    acc_dmean2d = np.zeros((S, 2))
    acc_dcov2d = np.zeros((S, 2, 2))
    acc_ddepthq = np.zeros(S)
    acc_dcolor = np.zeros((S, 3))
    acc_dclass = np.zeros((S, N))
    touched = np.zeros(S, dtype=bool)

    for r in range(len(ctx.tile_ids)):
        slots = ctx.tile_gauss[ctx.tile_starts[r]:ctx.tile_starts[r + 1]]
        (y0, y1, x0, x1), px, py = _tile_pixels(ctx.tile_ids[r], ctx.ntx, K.width, K.height)
        alpha, oE, skip, clamped, dx, dy = _tile_alphas(proj, slots, px, py, opacities)
        T_before = np.cumprod(1.0 - alpha, axis=0)
        T_before = np.vstack([np.ones((1, alpha.shape[1])), T_before[:-1]])
        included = np.ones_like(alpha, dtype=bool)
        if ctx.early_termination:
            included = T_before >= TRANSMITTANCE_EPS
            alpha = np.where(included, alpha, 0.0)
        w = alpha * T_before

        P = alpha.shape[1]
        dw = np.zeros((len(slots), P))
        if dC is not None:
            dCt = dC[y0:y1, x0:x1].reshape(P, 3)
            dw += colors[slots] @ dCt.T
            acc_dcolor[slots] += w @ dCt
        if dD is not None:
            dDt = dD[y0:y1, x0:x1].reshape(P)
            dw += depths_cam[slots, None] * dDt[None, :]
            acc_ddepthq[slots] += w @ dDt
        if dS is not None:
            dSt = dS[y0:y1, x0:x1].reshape(P, N)
            dw += class_vecs[slots] @ dSt.T
            acc_dclass[slots] += w @ dSt
        if dSil is not None:
            dw += dSil[y0:y1, x0:x1].reshape(1, P)

        touched[slots] |= (w > 0).any(axis=1)

        # d(loss)/d(alpha_i) = dw_i * T_i - sum_{k>i} dw_k w_k / (1 - alpha_i)
        dww = dw * w
        suffix = np.cumsum(dww[::-1], axis=0)[::-1]
        suffix = np.vstack([suffix[1:], np.zeros((1, P))])
        dalpha = dw * T_before - suffix / (1.0 - alpha)
        # gates: skipped contributions and clamped alphas pass no gradient
        doE = np.where(skip | clamped | ~included, 0.0, dalpha)

        acc_do[slots] += (doE * oE).sum(axis=1) / opacities[slots]
        dquad = -0.5 * oE * doE

        A = proj["inv_cov2d"][slots]
        Adx = A[:, 0, 0, None] * dx + A[:, 0, 1, None] * dy
        Ady = A[:, 0, 1, None] * dx + A[:, 1, 1, None] * dy
        acc_dmean2d[slots, 0] += (-2.0 * dquad * Adx).sum(axis=1)
        acc_dmean2d[slots, 1] += (-2.0 * dquad * Ady).sum(axis=1)
        # dquad/dSigma'^{-1} = delta delta^T, then dSigma' = -A dA A
        dA00 = (dquad * dx * dx).sum(axis=1)
        dA01 = (dquad * dx * dy).sum(axis=1)
        dA11 = (dquad * dy * dy).sum(axis=1)
        dAm = np.empty((len(slots), 2, 2))
        dAm[:, 0, 0] = dA00
        dAm[:, 0, 1] = dA01
        dAm[:, 1, 0] = dA01
        dAm[:, 1, 1] = dA11
        acc_dcov2d[slots] -= np.einsum("gij,gjk,gkl->gil", A, dAm, A)

    dparams = _projection_backward(proj, acc_dmean2d, acc_dcov2d, acc_ddepthq, K)

    # sorted slots map to distinct global indices, so plain indexing suffices
    gidx = ctx.sorted_to_global
    grads["dcolor"][gidx] = acc_dcolor
    grads["dclass_vec"][gidx] = acc_dclass
    grads["dmu"][gidx] = dparams["dmu"]
    grads["dlog_scale"][gidx] = dparams["dlog_scale"]
    grads["drotation"][gidx] = dparams["drotation"]
    o = sigmoid(map.opacity_logits)
    dop = np.zeros(G)
    dop[gidx] = acc_do
    grads["dopacity_logit"] = dop * o * (1.0 - o)
    t = np.zeros(G, dtype=bool)
    t[gidx[touched]] = True
    grads["touched"] = t
    return grads


def _projection_backward(proj, dmean2d, dcov2d, ddepthq, K: CameraIntrinsics):
    """Chain per-Gaussian image-space gradients back to (mu, log_scale, q)."""
    p = proj["p_cam"]
    Wm = proj["W"]
    J = proj["J"]
    M = proj["M"]
    sigma3 = proj["sigma3"]
    Rq = proj["Rq"]
    e2s = proj["e2s"]
    z = p[:, 2]

    dsym = dcov2d + np.transpose(dcov2d, (0, 2, 1))
    dM = np.einsum("gij,gjk,gkl->gil", dsym, M, sigma3)
    dSigma3 = np.einsum("gji,gjk,gkl->gil", M, dcov2d, M)
    dJ = np.einsum("gij,kj->gik", dM, Wm)

    dp = np.zeros_like(p)
    # through the projected mean
    dp[:, 0] += dmean2d[:, 0] * K.fx / z
    dp[:, 1] += dmean2d[:, 1] * K.fy / z
    dp[:, 2] += (-dmean2d[:, 0] * K.fx * p[:, 0] / z**2
                 - dmean2d[:, 1] * K.fy * p[:, 1] / z**2)
    # through the depth quantity
    dp[:, 2] += ddepthq
    # through the Jacobian entries
    dp[:, 0] += dJ[:, 0, 2] * (-K.fx / z**2)
    dp[:, 1] += dJ[:, 1, 2] * (-K.fy / z**2)
    dp[:, 2] += (dJ[:, 0, 0] * (-K.fx / z**2)
                 + dJ[:, 0, 2] * (2 * K.fx * p[:, 0] / z**3)
                 + dJ[:, 1, 1] * (-K.fy / z**2)
                 + dJ[:, 1, 2] * (2 * K.fy * p[:, 1] / z**3))
    dmu = dp @ Wm

    dD = np.einsum("gik,gij,gjk->gk", Rq, dSigma3, Rq)
    dlog_scale = dD * 2.0 * e2s
    dSsym = dSigma3 + np.transpose(dSigma3, (0, 2, 1))
    dR = np.einsum("gij,gjk,gk->gik", dSsym, Rq, e2s)
    drot = _rotation_backward(proj["qhat"], dR)
    return {"dmu": dmu, "dlog_scale": dlog_scale, "drotation": drot}


def _rotation_backward(qhat, dR):
    """dR (G,3,3) -> gradient w.r.t. the stored quaternion, including the
    internal renormalization (tangent-space projection)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zero = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz for the normalized quaternion
    dRdw = 2 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=1)
    dRdx = 2 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=1)
    dRdy = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    dRdz = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=1)
    dqhat = np.stack([
        np.einsum("gij,gij->g", dR, dRdw),
        np.einsum("gij,gij->g", dR, dRdx),
        np.einsum("gij,gij->g", dR, dRdy),
        np.einsum("gij,gij->g", dR, dRdz)], axis=-1)
    # renormalization: project out the radial component (stored q is unit)
    radial = np.einsum("gk,gk->g", dqhat, qhat)
    return dqhat - radial[:, None] * qhat
