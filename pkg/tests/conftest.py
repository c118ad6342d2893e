import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from tuberf.geometry import CameraIntrinsics, Pose, Quaternion

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


@st.composite
def quaternions(draw):
    v = np.array([draw(finite) for _ in range(4)])
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0.0, 0.0, 0.0])
    return Quaternion(*v)


@st.composite
def poses(draw, scale: float = 5.0):
    q = draw(quaternions())
    t = [draw(st.floats(-scale, scale, allow_nan=False)) for _ in range(3)]
    return Pose(q, t)


def random_pose(rng: np.random.Generator, scale: float = 5.0) -> Pose:
    return Pose(Quaternion(*rng.normal(size=4)), rng.uniform(-scale, scale, 3))


@pytest.fixture
def K100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
