import numpy as np
import pytest

from splatmap.core import CameraIntrinsics, GaussianMap, PoseSE3
from splatmap.core import quaternion_from_axis_angle


def random_map(rng, n, num_classes=5, z_range=(0.8, 3.0), xy=0.5,
               scale_range=(0.02, 0.12)):
    """Random scene in front of an identity camera; scales kept small enough
    that nothing straddles the near-plane margin."""
    m = GaussianMap(num_classes=num_classes)
    m.append_arrays(
        colors=rng.uniform(0.05, 0.95, (n, 3)),
        means=np.column_stack([
            rng.uniform(-xy, xy, n), rng.uniform(-xy, xy, n),
            rng.uniform(*z_range, n)]),
        log_scales=rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-2.0, 2.5, n),
        class_vecs=rng.uniform(0.0, 1.0, (n, num_classes)),
    )
    return m


def random_pose(rng, max_angle=0.25, max_shift=0.15):
    axis = rng.normal(size=3)
    return PoseSE3(
        quaternion_from_axis_angle(axis, rng.uniform(-max_angle, max_angle)),
        rng.uniform(-max_shift, max_shift, 3),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=60.0, fy=55.0, cx=16.0, cy=12.0, width=32, height=24)
