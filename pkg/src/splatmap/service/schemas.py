"""Request/response models for the mapping service API.

Image arrays travel as base64-encoded .npy payloads so clients keep exact
dtypes; paths in batch requests (runs, evaluation, rendering) are resolved on
the server's filesystem.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from pydantic import BaseModel, Field


def encode_array(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_array(data: str) -> np.ndarray:
    return np.load(io.BytesIO(base64.b64decode(data)), allow_pickle=False)


class HealthResponse(BaseModel):
    status: str
    version: str


class IntrinsicsModel(BaseModel):
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0


class PoseModel(BaseModel):
    q: list[float] = Field(default=[1.0, 0.0, 0.0, 0.0],
                           description="unit quaternion (w, x, y, z)")
    t: list[float] = Field(default=[0.0, 0.0, 0.0])


class RunRequest(BaseModel):
    dataset_root: str
    format: str
    out_dir: str
    pose_mode: str = "gt"
    config_path: str | None = None
    num_classes: int = 20
    export_renders: bool = True


class RunResponse(BaseModel):
    manifest: dict


class EvalRequest(BaseModel):
    run_dir: str
    dataset_root: str
    format: str | None = None      # default: the format recorded in the run
    every_frame: bool = False


class EvalResponse(BaseModel):
    rows: list[dict]
    averages: dict
    ate_rmse_cm: float | None
    gaussian_count: int
    csv: str


class RenderRequest(BaseModel):
    snapshot_path: str
    pose_file: str
    out_dir: str
    intrinsics: IntrinsicsModel | None = None


class RenderResponse(BaseModel):
    files: list[str]


class SessionCreateRequest(BaseModel):
    intrinsics: IntrinsicsModel
    num_classes: int = 20
    mapper_config: dict = Field(default_factory=dict)
    tracker_config: dict = Field(default_factory=dict)


class SessionCreateResponse(BaseModel):
    session_id: str


class FrameRequest(BaseModel):
    index: int
    timestamp: float
    rgb: str                     # base64 .npy, HxWx3 float in [0,1] or uint8
    depth: str                   # base64 .npy, HxW float meters
    semantic: str | None = None  # base64 .npy, HxW uint8 class ids
    pose: PoseModel | None = None


class FrameResponse(BaseModel):
    frame: int
    is_keyframe: bool
    flow: float | None
    predicted: int
    inserted: int
    pruned: int
    refined: int
    map_size: int


class CorrectionEntry(BaseModel):
    index: int
    timestamp: float
    pose: PoseModel


class CorrectionRequest(BaseModel):
    trajectory: list[CorrectionEntry]


class CorrectionResponse(BaseModel):
    corrections: int
    corrected_keyframes: int
    frames: list[int]
    loss_before: float
    loss_after: float
    noop: bool


class RenderViewRequest(BaseModel):
    pose: PoseModel
    channels: list[str] = Field(default=["color", "depth", "semantic", "silhouette"])


class RenderViewResponse(BaseModel):
    color: str | None = None
    depth: str | None = None
    semantic: str | None = None
    silhouette: str | None = None


class SessionStateResponse(BaseModel):
    session_id: str
    map_size: int
    num_classes: int
    frames_processed: int
    keyframes: list[int]
    corrections_applied: int
