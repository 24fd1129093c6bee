"""FastAPI service exposing the mapping engine.

Batch endpoints (/runs, /eval, /render) operate on server-local dataset and
output paths; session endpoints hold a live engine per client so frames can
be streamed in and views rendered back out.
"""

from __future__ import annotations

import itertools
import json
import os
import tempfile
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response

from .. import __version__, dataio
from ..core import CameraIntrinsics, Frame, PoseSE3
from ..engine import MappingEngine, evaluate_run, render_snapshot, run_sequence
from ..mapper import MapperConfig
from ..tracker import TrackerConfig, Trajectory
from . import schemas as S

POSE_MODES = {"gt": "ground_truth", "icp": "icp"}


def _intrinsics(model: S.IntrinsicsModel) -> CameraIntrinsics:
    return CameraIntrinsics(model.fx, model.fy, model.cx, model.cy,
                            model.width, model.height, model.depth_scale)


def _pose(model: S.PoseModel) -> PoseSE3:
    return PoseSE3(np.array(model.q, dtype=np.float64),
                   np.array(model.t, dtype=np.float64))


def _configs(req) -> tuple[MapperConfig, TrackerConfig]:
    if req.config_path:
        mcfg, tcfg = dataio.load_configs(req.config_path)
    else:
        mcfg, tcfg = MapperConfig(), TrackerConfig()
    if req.pose_mode not in POSE_MODES:
        raise HTTPException(422, f"unknown pose mode: {req.pose_mode}")
    tcfg.mode = POSE_MODES[req.pose_mode]
    return mcfg, tcfg


class _Session:
    def __init__(self, sid: str, engine: MappingEngine):
        self.sid = sid
        self.engine = engine
        self.lock = threading.Lock()  # engine is single-writer


def create_app() -> FastAPI:
    app = FastAPI(title="splatmap", version=__version__)
    sessions: dict[str, _Session] = {}
    counter = itertools.count(1)

    def session(sid: str) -> _Session:
        s = sessions.get(sid)
        if s is None:
            raise HTTPException(404, f"unknown session {sid}")
        return s

    @app.get("/health", response_model=S.HealthResponse)
    def health():
        return S.HealthResponse(status="ok", version=__version__)

    @app.post("/runs", response_model=S.RunResponse)
    def runs(req: S.RunRequest):
        mcfg, tcfg = _configs(req)
        try:
            source = dataio.load_sequence(req.dataset_root, req.format)
            manifest = run_sequence(source, mcfg, tcfg, req.out_dir,
                                    num_classes=req.num_classes,
                                    export_keyframe_renders=req.export_renders)
        except (FileNotFoundError, ValueError) as e:
            raise HTTPException(400, str(e))
        return S.RunResponse(manifest=manifest)

    @app.post("/eval", response_model=S.EvalResponse)
    def eval_run(req: S.EvalRequest):
        run_dir = Path(req.run_dir)
        manifest_file = run_dir / "manifest.json"
        if not manifest_file.exists():
            raise HTTPException(404, f"no manifest under {run_dir}")
        fmt = req.format
        if fmt is None:
            with open(manifest_file) as fh:
                fmt = json.load(fh)["format"]
        try:
            source = dataio.load_sequence(req.dataset_root, fmt)
            report = evaluate_run(run_dir, source, every_frame=req.every_frame)
        except (FileNotFoundError, ValueError) as e:
            raise HTTPException(400, str(e))
        csv = report.to_csv()
        (run_dir / "eval.csv").write_text(csv)
        return S.EvalResponse(rows=report.rows, averages=report.averages,
                              ate_rmse_cm=report.ate_rmse_cm,
                              gaussian_count=report.gaussian_count, csv=csv)

    @app.post("/render", response_model=S.RenderResponse)
    def render_poses(req: S.RenderRequest):
        if not Path(req.snapshot_path).exists():
            raise HTTPException(404, f"missing snapshot {req.snapshot_path}")
        if not Path(req.pose_file).exists():
            raise HTTPException(404, f"missing pose file {req.pose_file}")
        K = _intrinsics(req.intrinsics) if req.intrinsics else None
        try:
            files = render_snapshot(req.snapshot_path, req.pose_file,
                                    req.out_dir, K)
        except ValueError as e:
            raise HTTPException(400, str(e))
        return S.RenderResponse(files=files)

    @app.post("/sessions", response_model=S.SessionCreateResponse)
    def create_session(req: S.SessionCreateRequest):
        try:
            mcfg = MapperConfig(**req.mapper_config)
            tcfg = TrackerConfig(**req.tracker_config)
            engine = MappingEngine(_intrinsics(req.intrinsics), mcfg, tcfg,
                                   num_classes=req.num_classes)
        except (TypeError, ValueError) as e:
            raise HTTPException(422, str(e))
        sid = f"s{next(counter):06d}"
        sessions[sid] = _Session(sid, engine)
        return S.SessionCreateResponse(session_id=sid)

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": sorted(sessions)}

    @app.delete("/sessions/{sid}")
    def delete_session(sid: str):
        session(sid)
        del sessions[sid]
        return {"deleted": sid}

    @app.get("/sessions/{sid}/state", response_model=S.SessionStateResponse)
    def session_state(sid: str):
        s = session(sid)
        return S.SessionStateResponse(session_id=sid, **s.engine.stats())

    @app.post("/sessions/{sid}/frames", response_model=S.FrameResponse)
    def push_frame(sid: str, req: S.FrameRequest):
        s = session(sid)
        rgb = S.decode_array(req.rgb)
        if rgb.dtype == np.uint8:
            rgb = rgb.astype(np.float64) / 255.0
        depth = S.decode_array(req.depth).astype(np.float64)
        if req.semantic is not None:
            semantic = S.decode_array(req.semantic)
        else:
            semantic = np.full(depth.shape, 255, dtype=np.uint8)
        pose = _pose(req.pose) if req.pose else None
        try:
            frame = Frame(req.index, req.timestamp, rgb, depth, semantic, pose=pose)
        except ValueError as e:
            raise HTTPException(422, str(e))
        K = s.engine.K
        if depth.shape != (K.height, K.width):
            raise HTTPException(422, "frame size does not match session intrinsics")
        with s.lock:
            try:
                report = s.engine.process_frame(frame)
            except ValueError as e:
                raise HTTPException(400, str(e))
        return S.FrameResponse(
            frame=frame.index, is_keyframe=report["is_keyframe"],
            flow=report["flow"], predicted=report["predicted"],
            inserted=report["inserted"], pruned=report["pruned"],
            refined=report["refined"], map_size=report["map_size"])

    @app.post("/sessions/{sid}/corrections", response_model=S.CorrectionResponse)
    def push_corrections(sid: str, req: S.CorrectionRequest):
        s = session(sid)
        traj = Trajectory(
            np.array([e.timestamp for e in req.trajectory]),
            [_pose(e.pose) for e in req.trajectory],
            np.array([e.index for e in req.trajectory], dtype=np.int64))
        with s.lock:
            report = s.engine.apply_corrected_trajectory(traj)
        return S.CorrectionResponse(
            corrections=report["corrections"],
            corrected_keyframes=report["corrected_keyframes"],
            frames=report.get("frames", []),
            loss_before=report.get("loss_before", 0.0),
            loss_after=report.get("loss_after", 0.0),
            noop=report.get("noop", False))

    @app.post("/sessions/{sid}/render", response_model=S.RenderViewResponse)
    def render_view(sid: str, req: S.RenderViewRequest):
        s = session(sid)
        bad = set(req.channels) - {"color", "depth", "semantic", "silhouette"}
        if bad:
            raise HTTPException(422, f"unknown channels: {sorted(bad)}")
        with s.lock:
            out = s.engine.render_view(_pose(req.pose), channels=req.channels)
        resp = S.RenderViewResponse(silhouette=S.encode_array(out.silhouette))
        if out.color is not None:
            resp.color = S.encode_array(out.color)
        if out.depth is not None:
            resp.depth = S.encode_array(out.depth)
        if out.semantic is not None:
            resp.semantic = S.encode_array(out.semantic)
        return resp

    @app.get("/sessions/{sid}/snapshot")
    def session_snapshot(sid: str):
        s = session(sid)
        with tempfile.NamedTemporaryFile(suffix=".gsnap", delete=False) as tmp:
            path = tmp.name
        try:
            with s.lock:
                dataio.snapshot_save(s.engine.map, path)
            data = Path(path).read_bytes()
        finally:
            os.unlink(path)
        return Response(content=data, media_type="application/octet-stream")

    return app
