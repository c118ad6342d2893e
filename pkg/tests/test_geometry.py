import math

import numpy as np
import pytest
from conftest import poses, quaternions, random_pose
from hypothesis import given
from hypothesis import strategies as st

from tuberf.geometry import (CameraIntrinsics, Pose, Quaternion, backproject, compose, generate_rays, helix_poses,
                             inverse, look_at, pose_distance, project, project_points, ray_arrays, signed_angles,
                             slerp, spin_pose_grid)

QZ90 = Quaternion.from_axis_angle([0, 0, 1], math.pi / 2)


def close_q(a: Quaternion, b: Quaternion, tol=1e-9):
    return min(np.abs(a.as_array() - b.as_array()).max(), np.abs(a.as_array() + b.as_array()).max()) < tol


def test_slerp_midpoint_closed_form():
    q = slerp(Quaternion.identity(), QZ90, 0.5)
    assert np.allclose(q.as_array(), [math.cos(math.pi / 8), 0, 0, math.sin(math.pi / 8)], atol=1e-9)
    assert np.allclose(q.as_array(), [0.92388, 0, 0, 0.38268], atol=1e-5)


@given(quaternions(), quaternions())
def test_slerp_endpoints_and_identity(a, b):
    assert close_q(slerp(a, b, 0.0), a)
    assert close_q(slerp(a, b, 1.0), b)
    assert close_q(slerp(a, a, 0.7), a)


@given(quaternions(), quaternions(), st.floats(0, 1))
def test_slerp_unit_norm(a, b, u):
    assert abs(np.linalg.norm(slerp(a, b, u).as_array()) - 1) < 1e-9


def test_slerp_takes_shortest_arc():
    b = Quaternion(*(-QZ90.as_array()))
    mid = slerp(Quaternion.identity(), b, 0.5)
    assert abs(mid.angle() - math.pi / 4) < 1e-9


def test_slerp_near_parallel_falls_back():
    a = Quaternion.identity()
    b = Quaternion.from_axis_angle([0, 1, 0], 1e-9)
    q = slerp(a, b, 0.5)
    assert np.all(np.isfinite(q.as_array()))
    assert abs(q.angle() - 5e-10) < 1e-12


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)
        assert np.allclose(inverse(a).matrix(), np.linalg.inv(a.matrix()), atol=1e-9)


def test_compose_translate_rotate_point():
    t = Pose(Quaternion.identity(), (1, 0, 0))
    r = Pose(QZ90, (0, 0, 0))
    assert np.allclose(compose(t, r).apply([0, 1, 0]), [0, 0, 0], atol=1e-12)


@given(poses(), poses(), poses())
def test_group_axioms(a, b, c):
    e = Pose.identity()
    assert np.allclose(compose(a, inverse(a)).matrix(), e.matrix(), atol=1e-9)
    assert np.allclose(compose(e, b).matrix(), b.matrix(), atol=1e-12)
    lhs = compose(compose(a, b), c).matrix()
    rhs = compose(a, compose(b, c)).matrix()
    assert np.allclose(lhs, rhs, atol=1e-9)
    assert np.allclose(lhs, a.matrix() @ b.matrix() @ c.matrix(), atol=1e-9)


def test_pose_rotation_matrix_is_read_only_copy():
    p = Pose(QZ90, (1, 2, 3))
    R = p.R
    R[0, 0] = 99.0
    assert p.R[0, 0] != 99.0


def test_pose_distance():
    a = Pose.identity()
    b = Pose(QZ90, (3, 4, 0))
    ang, d = pose_distance(a, b)
    assert abs(ang - math.pi / 2) < 1e-12 and abs(d - 5) < 1e-12


def test_backproject_examples(K100):
    assert np.allclose(backproject((50, 50), 3.0, K100), [0, 0, 3])
    assert np.allclose(backproject((100, 50), 2.0, K100), [1, 0, 2])
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100)
    assert np.allclose(backproject((150, 50), 2.0, K), [2, 0, 2])
    with pytest.raises(ValueError):
        backproject((50, 50), 0.0, K100)
    with pytest.raises(ValueError):
        backproject((500, 50), 1.0, K100)


def test_project_examples():
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100)
    uv, ok = project([2, 0, 2], K)
    assert ok and np.allclose(uv, (150, 50))
    uv, ok = project([0, 0, 5], K)
    assert ok and np.allclose(uv, (50, 50))
    _, ok = project([1, 1, 0], K)
    assert not ok
    _, ok = project([0, 0, -1], K)
    assert not ok


def test_project_backproject_roundtrip(K100):
    rng = np.random.default_rng(1)
    uv = rng.uniform(-0.5, 100.49, size=(1000, 2))
    d = rng.uniform(0.1, 20, size=1000)
    for (u, v), z in zip(uv, d):
        p = backproject((u, v), z, K100)
        assert abs(p[2] - z) < 1e-12
    pts = np.stack([(uv[:, 0] - 50) * d / 100, (uv[:, 1] - 50) * d / 100, d], axis=1)
    back, ok = project_points(pts, K100)
    assert ok.all()
    assert np.abs(back - uv).max() < 1e-6


def test_generate_rays(K100):
    r = generate_rays(Pose.identity(), K100, [(50, 50)])[0]
    assert np.allclose(r.direction, [0, 0, 1])
    rot_y = Pose(Quaternion.from_axis_angle([0, 1, 0], math.pi / 2), (1, 2, 3))
    r = generate_rays(rot_y, K100, [(50, 50)])[0]
    assert np.allclose(r.direction, [1, 0, 0], atol=1e-12)
    rays = generate_rays(rot_y, K100, [(0, 0), (10, 90), (100, 100)])
    for r in rays:
        assert np.allclose(r.origin, (1, 2, 3))
        assert abs(np.linalg.norm(r.direction) - 1) < 1e-9


def test_ray_arrays_cosine_gives_camera_z(K100):
    rng = np.random.default_rng(2)
    pose = random_pose(rng)
    uv = rng.uniform(0, 100, (50, 2))
    o, d, cz = ray_arrays(pose, K100, uv)
    tau = rng.uniform(0.5, 5, 50)
    cam = inverse(pose).apply(o + tau[:, None] * d)
    assert np.allclose(cam[:, 2], tau * cz, atol=1e-9)


def test_spin_grid_216():
    p = Pose(QZ90, (1, 2, 3))
    grid = spin_pose_grid(p, (5, 2.5, 1.25))
    assert len(grid) == 216
    assert all(g.translation == p.translation for g in grid)
    assert len({tuple(np.round(g.rotation.as_array(), 12)) for g in grid}) == 216


def test_spin_grid_zero_angle():
    p = Pose(QZ90, (1, 2, 3))
    grid = spin_pose_grid(p, (0,))
    assert len(grid) == 1
    assert np.allclose(grid[0].matrix(), p.matrix())
    with pytest.raises(ValueError):
        spin_pose_grid(p, ())


@given(st.lists(st.floats(0.1, 10), min_size=1, max_size=3, unique=True))
def test_spin_grid_cardinality(angles):
    assert len(signed_angles(angles)) == 2 * len(angles)
    assert len(spin_pose_grid(Pose.identity(), angles)) == (2 * len(angles)) ** 3


def test_spin_grid_axis_order():
    g = spin_pose_grid(Pose.identity(), (5,))
    # first signed value is +5 on every axis, composed x then y then z in the camera frame
    rx = Quaternion.from_axis_angle([1, 0, 0], math.radians(5)).to_matrix()
    ry = Quaternion.from_axis_angle([0, 1, 0], math.radians(5)).to_matrix()
    rz = Quaternion.from_axis_angle([0, 0, 1], math.radians(5)).to_matrix()
    assert np.allclose(g[0].R, rz @ ry @ rx, atol=1e-12)


def test_helix_closed_form():
    a = Pose.identity()
    b = Pose(QZ90, (0, 0, 2))
    h = helix_poses(a, b, 3)
    for k, p in enumerate(h, start=1):
        assert np.allclose(p.t, [0, 0, 0.5 * k], atol=1e-12)
        assert abs(p.rotation.angle() - math.radians(22.5 * k)) < 1e-9
        assert close_q(p.rotation, Quaternion.from_axis_angle([0, 0, 1], math.radians(22.5 * k)))


@given(poses(), poses())
def test_helix_midpoint_and_monotone(a, b):
    m = helix_poses(a, b, 1)[0]
    assert np.allclose(m.t, 0.5 * (a.t + b.t), atol=1e-12)
    assert close_q(m.rotation, slerp(a.rotation, b.rotation, 0.5))
    angles = [pose_distance(a, p)[0] for p in helix_poses(a, b, 5)]
    assert all(x <= y + 1e-9 for x, y in zip(angles, angles[1:]))


def test_helix_equal_endpoints():
    a = Pose(QZ90, (1, 1, 1))
    assert all(np.allclose(p.matrix(), a.matrix()) for p in helix_poses(a, a, 4))
    with pytest.raises(ValueError):
        helix_poses(a, a, 0)


def test_look_at_forward():
    p = look_at([0, 0, 0], [3, 0, 0])
    assert np.allclose(p.forward, [1, 0, 0])
    assert np.allclose(p.R @ p.R.T, np.eye(3), atol=1e-12)
