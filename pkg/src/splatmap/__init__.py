"""splatmap: incremental RGB-D semantic SLAM mapping on 3D Gaussian splats."""

__version__ = "0.1.0"

from .core import (
    CameraIntrinsics,
    Frame,
    Gaussian,
    GaussianMap,
    PoseSE3,
    backproject,
    covariance3d,
    quaternion_to_rotation_matrix,
)
from .renderer import RenderOutput, render, render_backward

__all__ = [
    "CameraIntrinsics",
    "Frame",
    "Gaussian",
    "GaussianMap",
    "PoseSE3",
    "RenderOutput",
    "backproject",
    "covariance3d",
    "quaternion_to_rotation_matrix",
    "render",
    "render_backward",
    "__version__",
]
