"""Dataset ingestion, map persistence and image export.

Formats: TUM RGB-D roots (rgb.txt/depth.txt/groundtruth.txt, 16-bit depth
PNG at 5000 units per meter), ScanNet-style directories (color/depth/pose/
intrinsic, millimeter depth), and procedural synthetic rooms described by a
key=value file.  Depth 0 stays the invalid sentinel through every format.
"""

from __future__ import annotations

import dataclasses
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, Frame, GaussianMap, PoseSE3
from .mapper import MapperConfig
from .tracker import Trajectory, TrackerConfig
from . import synthetic as synth

SNAPSHOT_MAGIC = b"GS4S"
SNAPSHOT_VERSION = 1

# fixed 20-class colorization palette (RGB, 0-255); label 255 renders black
PALETTE_20 = np.array([
    [174, 199, 232], [152, 223, 138], [31, 119, 180], [255, 187, 120],
    [188, 189, 34], [140, 86, 75], [255, 152, 150], [214, 39, 40],
    [197, 176, 213], [148, 103, 189], [196, 156, 148], [23, 190, 207],
    [247, 182, 210], [219, 219, 141], [255, 127, 14], [158, 218, 229],
    [44, 160, 44], [112, 128, 144], [227, 119, 194], [82, 84, 163],
], dtype=np.uint8)


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    rgb_path: str | None = None
    depth_path: str | None = None
    label_path: str | None = None
    pose: PoseSE3 | None = None
    holdout: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class SequenceSource:
    """A loaded dataset: intrinsics plus per-frame records, decoded lazily."""

    root: str
    format: str
    intrinsics: CameraIntrinsics
    records: list
    warnings_count: int = 0
    _loader: object = None

    def __len__(self):
        return len(self.records)

    def frame(self, i: int) -> Frame:
        return self._loader(self.records[i])

    def mapped_records(self):
        return [r for r in self.records if not r.holdout]

    def holdout_records(self):
        return [r for r in self.records if r.holdout]


# ---------------------------------------------------------------------------
# image primitives


def _read_rgb(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def _read_depth(path, depth_scale: float) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return arr / depth_scale


def _read_labels(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def write_color_png(rgb, path):
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def write_depth_png(depth_m, path):
    """16-bit millimeter PNG; values beyond 65.535 m clamp with a warning."""
    mm = np.asarray(depth_m, dtype=np.float64) * 1000.0
    if (mm > 65535).any():
        warnings.warn("depth values above 65.535 m clamped in PNG export")
    mm = np.clip(np.rint(mm), 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)


def read_depth_png_m(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def write_semantic_png(labels, path):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    known = labels != 255
    out[known] = PALETTE_20[labels[known].astype(np.int64) % len(PALETTE_20)]
    Image.fromarray(out).save(path)


def write_gray_png(values, path):
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def write_image(buffer, path):
    """Dispatch on buffer shape/dtype: HxWx3 float color, HxW float depth
    (16-bit millimeters), HxW integer labels (palette colorized)."""
    arr = np.asarray(buffer)
    if arr.ndim == 3 and arr.shape[2] == 3:
        write_color_png(arr, path)
    elif arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating):
        write_depth_png(arr, path)
    elif arr.ndim == 2:
        write_semantic_png(arr, path)
    else:
        raise ValueError(f"cannot infer image kind for shape {arr.shape}")


# ---------------------------------------------------------------------------
# TUM RGB-D


def _parse_stamped_file(path: Path):
    """TUM-style 'timestamp value...' lines; returns list of (ts, fields)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                ts = float(parts[0])
            except ValueError as e:
                raise ValueError(f"{path.name}:{lineno}: unparseable line") from e
            rows.append((ts, parts[1:]))
    return rows


def _associate(ts_a, ts_b, window=0.02):
    """Greedy unique nearest-timestamp association (classic TUM scheme)."""
    candidates = []
    for i, ta in enumerate(ts_a):
        for j, tb in enumerate(ts_b):
            d = abs(ta - tb)
            if d <= window:
                candidates.append((d, i, j))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def _tum_pose(fields):
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in fields[:7])
    return PoseSE3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


TUM_DEFAULT_INTRINSICS = dict(fx=525.0, fy=525.0, cx=319.5, cy=239.5)


def load_tum(root) -> SequenceSource:
    """TUM RGB-D root: rgb.txt/depth.txt associated within 20 ms, poses from
    groundtruth.txt when present, 16-bit depth PNGs at 5000 per meter."""
    root = Path(root)
    rgb_file = root / "rgb.txt"
    depth_file = root / "depth.txt"
    if not rgb_file.exists() or not depth_file.exists():
        raise FileNotFoundError(f"missing rgb.txt/depth.txt under {root}")
    rgb_rows = _parse_stamped_file(rgb_file)
    depth_rows = _parse_stamped_file(depth_file)
    gt_rows = []
    gt_file = root / "groundtruth.txt"
    if gt_file.exists():
        gt_rows = _parse_stamped_file(gt_file)

    pairs = _associate([t for t, _ in rgb_rows], [t for t, _ in depth_rows])
    dropped = len(rgb_rows) - len(pairs)
    if dropped:
        warnings.warn(f"{dropped} rgb frames had no depth match within 20 ms")

    gt_ts = np.array([t for t, _ in gt_rows]) if gt_rows else np.zeros(0)
    records = []
    for k, (i, j) in enumerate(pairs):
        ts = rgb_rows[i][0]
        pose = None
        if len(gt_ts):
            g = int(np.argmin(np.abs(gt_ts - ts)))
            if abs(gt_ts[g] - ts) <= 0.02:
                pose = _tum_pose(gt_rows[g][1])
        records.append(FrameRecord(
            index=k, timestamp=ts,
            rgb_path=str(root / rgb_rows[i][1][0]),
            depth_path=str(root / depth_rows[j][1][0]),
            pose=pose,
        ))
    if not records:
        raise ValueError(f"no associated frames under {root}")

    first = _read_rgb(records[0].rgb_path)
    h, w = first.shape[:2]
    calib = root / "intrinsics.txt"
    if calib.exists():
        vals = [float(v) for v in calib.read_text().split()[:4]]
        intr = CameraIntrinsics(vals[0], vals[1], vals[2], vals[3], w, h, 5000.0)
    else:
        intr = CameraIntrinsics(width=w, height=h, depth_scale=5000.0,
                                **TUM_DEFAULT_INTRINSICS)

    def loader(rec: FrameRecord) -> Frame:
        rgb = _read_rgb(rec.rgb_path)
        depth = _read_depth(rec.depth_path, 5000.0)
        sem = np.full(depth.shape, 255, dtype=np.uint8)
        return Frame(rec.index, rec.timestamp, rgb, depth, sem, pose=rec.pose)

    return SequenceSource(str(root), "tum", intr, records, dropped, loader)


# ---------------------------------------------------------------------------
# ScanNet-style directories


def load_scannet_dir(root) -> SequenceSource:
    """ScanNet export layout: color/%d.jpg|png, depth/%d.png [mm],
    pose/%d.txt (4x4 camera-to-world), intrinsic/intrinsic_depth.txt and an
    optional label/%d.png directory."""
    root = Path(root)
    color_dir = root / "color"
    depth_dir = root / "depth"
    pose_dir = root / "pose"
    label_dir = root / "label"
    depth_files = sorted(depth_dir.glob("*.png"), key=lambda p: int(p.stem))
    if not depth_files:
        raise FileNotFoundError(f"no depth frames under {depth_dir}")

    def find_color(stem):
        for ext in (".jpg", ".png", ".jpeg"):
            p = color_dir / f"{stem}{ext}"
            if p.exists():
                return p
        return None

    intr_file = root / "intrinsic" / "intrinsic_depth.txt"
    if not intr_file.exists():
        raise FileNotFoundError(f"missing {intr_file}")
    Kmat = np.loadtxt(intr_file)
    depth0 = np.asarray(Image.open(depth_files[0]))
    h, w = depth0.shape
    intr = CameraIntrinsics(float(Kmat[0, 0]), float(Kmat[1, 1]),
                            float(Kmat[0, 2]), float(Kmat[1, 2]),
                            w, h, 1000.0)

    records = []
    skipped = 0
    for dfile in depth_files:
        stem = dfile.stem
        cfile = find_color(stem)
        pfile = pose_dir / f"{stem}.txt"
        if cfile is None or not pfile.exists():
            raise ValueError(f"mismatched frame counts at index {stem}")
        T = np.loadtxt(pfile)
        if not np.isfinite(T).all():
            skipped += 1  # ScanNet marks untracked frames with -inf poses
            continue
        if abs(np.linalg.det(T[:3, :3])) < 1e-8:
            raise ValueError(f"non-invertible pose matrix in {pfile}")
        lfile = label_dir / f"{stem}.png"
        records.append(FrameRecord(
            index=int(stem), timestamp=float(int(stem)) / 30.0,
            rgb_path=str(cfile), depth_path=str(dfile),
            label_path=str(lfile) if lfile.exists() else None,
            pose=PoseSE3.from_matrix(T),
        ))
    if skipped:
        warnings.warn(f"skipped {skipped} frames with invalid (-inf) poses")

    def loader(rec: FrameRecord) -> Frame:
        depth = _read_depth(rec.depth_path, 1000.0)
        rgb = _read_rgb(rec.rgb_path)
        if rgb.shape[:2] != depth.shape:
            img = Image.fromarray((rgb * 255).astype(np.uint8)).resize(
                (depth.shape[1], depth.shape[0]), Image.BILINEAR)
            rgb = np.asarray(img, dtype=np.float64) / 255.0
        if rec.label_path:
            sem = _read_labels(rec.label_path)
        else:
            sem = np.full(depth.shape, 255, dtype=np.uint8)
        return Frame(rec.index, rec.timestamp, rgb, depth, sem, pose=rec.pose)

    return SequenceSource(str(root), "scannet_dir", intr, records, skipped, loader)


# ---------------------------------------------------------------------------
# synthetic rooms


def load_synthetic(root) -> SequenceSource:
    """Synthetic room described by `synthetic.txt` (key=value per line,
    mirroring the generator config fields)."""
    root = Path(root)
    spec = root / "synthetic.txt" if root.is_dir() else root
    if not spec.exists():
        raise FileNotFoundError(f"missing synthetic sequence file {spec}")
    kv = parse_kv_file(spec)
    cfg = synth.SyntheticConfig()
    for key, raw in kv.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown synthetic key: {key}")
        cur = getattr(cfg, key)
        if isinstance(cur, tuple):
            setattr(cfg, key, tuple(float(v) for v in raw.split(",")))
        elif isinstance(cur, int):
            setattr(cfg, key, int(raw))
        else:
            setattr(cfg, key, float(raw))
    K = cfg.intrinsics()
    records = []
    for i in range(cfg.frames):
        angle = 2.0 * np.pi * i / cfg.frames
        hold = bool(cfg.holdout_every) and i % cfg.holdout_every == cfg.holdout_every // 2
        records.append(FrameRecord(index=i, timestamp=i / 30.0,
                                   pose=synth.orbit_pose(cfg, angle),
                                   holdout=hold, extra={"angle": angle}))

    def loader(rec: FrameRecord) -> Frame:
        return synth.generate_frame(cfg, K, rec.index, rec.extra["angle"],
                                    timestamp=rec.timestamp)

    return SequenceSource(str(root), "synthetic", K, records, 0, loader)


FORMAT_LOADERS = {
    "tum": load_tum,
    "scannet_dir": load_scannet_dir,
    "synthetic": load_synthetic,
}


def load_sequence(root, format: str) -> SequenceSource:
    if format not in FORMAT_LOADERS:
        raise ValueError(f"unknown dataset format: {format}")
    return FORMAT_LOADERS[format](root)


# ---------------------------------------------------------------------------
# flat key=value configuration files


def parse_kv_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, val = s.partition("=")
            out[key.strip()] = val.strip()
    return out


def load_configs(path) -> tuple[MapperConfig, TrackerConfig]:
    """Flat key=value file whose keys mirror the mapper/tracker config
    fields; unknown keys are errors."""
    mapper_fields = {f.name: f.type for f in dataclasses.fields(MapperConfig)}
    tracker_fields = {f.name: f.type for f in dataclasses.fields(TrackerConfig)}
    mcfg = MapperConfig()
    tcfg = TrackerConfig()
    for key, raw in parse_kv_file(path).items():
        if key in mapper_fields:
            target, cur = mcfg, getattr(mcfg, key)
        elif key in tracker_fields:
            target, cur = tcfg, getattr(tcfg, key)
        else:
            raise ValueError(f"unknown config key: {key}")
        if isinstance(cur, bool):
            setattr(target, key, raw.lower() in ("1", "true", "yes"))
        elif isinstance(cur, int):
            setattr(target, key, int(raw))
        elif isinstance(cur, float):
            setattr(target, key, float(raw))
        else:
            setattr(target, key, raw)
    mcfg.__post_init__()
    tcfg.__post_init__()
    return mcfg, tcfg


# ---------------------------------------------------------------------------
# trajectories (TUM groundtruth.txt format)


def save_trajectory_tum(traj: Trajectory, path):
    """timestamp tx ty tz qx qy qz qw per line."""
    with open(path, "w") as fh:
        for ts, pose in zip(traj.timestamps, traj.poses):
            qw, qx, qy, qz = pose.q
            tx, ty, tz = pose.t
            fh.write(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def load_trajectory_tum(path, indices=None) -> Trajectory:
    rows = _parse_stamped_file(Path(path))
    poses = [_tum_pose(fields) for _, fields in rows]
    ts = np.array([t for t, _ in rows])
    return Trajectory(ts, poses, indices)


# ---------------------------------------------------------------------------
# snapshots (bitwise-exact persistence)


def _snapshot_dtype(num_classes: int):
    return np.dtype([
        ("color", "<f8", (3,)),
        ("mu", "<f8", (3,)),
        ("log_scale", "<f8", (3,)),
        ("rotation", "<f8", (4,)),
        ("opacity_logit", "<f8"),
        ("class_vec", "<f8", (num_classes,)),
        ("update_count", "<u4"),
        ("epoch", "<i4"),
    ])


def snapshot_save(map: GaussianMap, path):
    """Versioned binary container; load(save(m)) round-trips bitwise."""
    rec = np.zeros(len(map), dtype=_snapshot_dtype(map.num_classes))
    rec["color"] = map.colors
    rec["mu"] = map.means
    rec["log_scale"] = map.log_scales
    rec["rotation"] = map.rotations
    rec["opacity_logit"] = map.opacity_logits
    rec["class_vec"] = map.class_vecs
    rec["update_count"] = map.update_counts
    rec["epoch"] = map.epochs
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<IIQ", SNAPSHOT_VERSION, map.num_classes, len(map)))
        fh.write(rec.tobytes())


def snapshot_load(path) -> GaussianMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError("not a snapshot")
        version, num_classes, count = struct.unpack("<IIQ", fh.read(16))
        if version > SNAPSHOT_VERSION:
            raise ValueError("unsupported version")
        rec = np.frombuffer(fh.read(), dtype=_snapshot_dtype(num_classes), count=count)
    m = GaussianMap(num_classes=num_classes)
    m.colors = rec["color"].astype(np.float64).reshape(count, 3)
    m.means = rec["mu"].astype(np.float64).reshape(count, 3)
    m.log_scales = rec["log_scale"].astype(np.float64).reshape(count, 3)
    m.rotations = rec["rotation"].astype(np.float64).reshape(count, 4)
    m.opacity_logits = rec["opacity_logit"].astype(np.float64).reshape(count)
    m.class_vecs = rec["class_vec"].astype(np.float64).reshape(count, num_classes)
    m.update_counts = rec["update_count"].astype(np.int64).reshape(count)
    m.epochs = rec["epoch"].astype(np.int64).reshape(count)
    return m


# ---------------------------------------------------------------------------
# PLY export


_PLY_PROPS = [
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("opacity", "<f4"),
    ("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4"),
    ("rot_0", "<f4"), ("rot_1", "<f4"), ("rot_2", "<f4"), ("rot_3", "<f4"),
    ("class", "u1"),
]

_PLY_TYPE_NAMES = {"<f4": "float", "u1": "uchar"}


def export_ply(map: GaussianMap, path):
    """Binary little-endian PLY with linear scales [m], opacity in (0,1) and
    class = argmax of the per-class scores."""
    n = len(map)
    rec = np.zeros(n, dtype=np.dtype(_PLY_PROPS))
    if n:
        rec["x"], rec["y"], rec["z"] = map.means.T.astype(np.float32)
        cols = np.clip(np.rint(map.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = cols.T
        rec["opacity"] = map.opacities.astype(np.float32)
        scales = np.exp(map.log_scales).astype(np.float32)
        rec["scale_0"], rec["scale_1"], rec["scale_2"] = scales.T
        rec["rot_0"], rec["rot_1"], rec["rot_2"], rec["rot_3"] = \
            map.rotations.T.astype(np.float32)
        rec["class"] = np.argmax(map.class_vecs, axis=1).astype(np.uint8)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPE_NAMES[t]} {name}" for name, t in _PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def load_ply(path):
    """Re-import of export_ply output; returns the structured record array."""
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline().decode("ascii").strip()
            header.append(line)
            if line == "end_header":
                break
        if header[0] != "ply" or "format binary_little_endian 1.0" not in header[1]:
            raise ValueError("not a binary little-endian PLY")
        n = int(next(h.split()[-1] for h in header if h.startswith("element vertex")))
        return np.frombuffer(fh.read(), dtype=np.dtype(_PLY_PROPS), count=n)
