"""Rigid-body math, pinhole cameras, rays and pose synthesis.

Conventions used throughout the package: the camera looks down +z with x
pointing right and y pointing down; poses map camera coordinates to world
coordinates. Pixel ``(u, v)`` is column ``u``, row ``v`` and its centre sits
at the integer coordinate, so the footprint of the image is
``[-0.5, width - 0.5) x [-0.5, height - 0.5)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion ``w + xi + yj + zk``. Normalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must have finite, non-zero norm")
        for name in ("w", "x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)) / n)

    @classmethod
    def identity(cls) -> Quaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Quaternion:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), *(axis * s))

    @classmethod
    def from_array(cls, q) -> Quaternion:
        return cls(*np.asarray(q, dtype=float))

    @classmethod
    def from_matrix(cls, m) -> Quaternion:
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        q = cls(*q)
        return q if q.w >= 0 else cls(-q.w, -q.x, -q.y, -q.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def conjugate(self) -> Quaternion:
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: Quaternion) -> Quaternion:
        a, b = self, other
        return Quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def dot(self, other: Quaternion) -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def rotate(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.to_matrix().T

    def angle(self) -> float:
        """Rotation angle in radians, in ``[0, pi]``."""
        return 2.0 * math.atan2(math.sqrt(self.x**2 + self.y**2 + self.z**2), abs(self.w))


def slerp(q0: Quaternion, q1: Quaternion, u: float) -> Quaternion:
    """Spherical linear interpolation along the shortest arc."""
    a = q0.as_array()
    b = q1.as_array()
    d = float(a @ b)
    if d < 0.0:
        b = -b
        d = -d
    if d > 1.0 - 1e-8:
        return Quaternion(*((1.0 - u) * a + u * b))
    theta = math.acos(min(d, 1.0))
    s = math.sin(theta)
    return Quaternion(*((math.sin((1.0 - u) * theta) / s) * a + (math.sin(u * theta) / s) * b))


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not isinstance(self.rotation, Quaternion):
            object.__setattr__(self, "rotation", Quaternion(*np.asarray(self.rotation, dtype=float).reshape(4)))
        t = tuple(float(v) for v in np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(Quaternion.from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @cached_property
    def _R(self) -> np.ndarray:
        m = self.rotation.to_matrix()
        m.flags.writeable = False
        return m

    @property
    def R(self) -> np.ndarray:
        return self._R.copy()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map points (..., 3) from this pose's local frame to the parent frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    @property
    def forward(self) -> np.ndarray:
        return self.R[:, 2]

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)


def compose(a: Pose, b: Pose) -> Pose:
    """``a @ b`` as 4x4 matrices: apply ``b`` first, then ``a``."""
    return Pose(a.rotation * b.rotation, a.rotation.rotate(b.t) + a.t)


def inverse(a: Pose) -> Pose:
    qi = a.rotation.conjugate()
    return Pose(qi, -qi.rotate(a.t))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle in radians, translation distance) between two poses."""
    d = compose(inverse(a), b)
    return d.rotation.angle(), float(np.linalg.norm(d.t))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> CameraIntrinsics:
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def in_bounds(self, u, v):
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)

    def pixel_grid(self) -> np.ndarray:
        """All pixel centres as (H*W, 2) array of (u, v), row-major."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u.ravel(), v.ravel()], axis=-1).astype(float)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("ray direction must be non-zero")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        object.__setattr__(self, "direction", tuple(d / n))
        object.__setattr__(self, "origin", tuple(np.asarray(self.origin, dtype=float).reshape(3)))

    def at(self, tau):
        return np.asarray(self.origin) + np.multiply.outer(tau, np.asarray(self.direction))


def backproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point whose z equals ``depth`` and projects onto ``pixel``."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = pixel
    if not K.in_bounds(u, v):
        raise ValueError(f"pixel {pixel} outside the {K.width}x{K.height} image")
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def backproject_pixels(uv: np.ndarray, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    return np.stack([(uv[..., 0] - K.cx) * depth / K.fx, (uv[..., 1] - K.cy) * depth / K.fy, depth], axis=-1)


def project(point, K: CameraIntrinsics) -> tuple[tuple[float, float], bool]:
    uv, ok = project_points(np.asarray(point, dtype=float)[None], K)
    return (float(uv[0, 0]), float(uv[0, 1])), bool(ok[0])


def project_points(points: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of camera-frame points; returns ((N, 2) uv, in-frustum flags)."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = K.fx * p[..., 0] / zs + K.cx
    v = K.fy * p[..., 1] / zs + K.cy
    ok = front & K.in_bounds(u, v)
    return np.stack([u, v], axis=-1), ok


def camera_directions(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Unit bearing vectors in the camera frame for pixel coordinates (N, 2)."""
    d = backproject_pixels(uv, np.ones(len(uv)), K)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_arrays(pose: Pose, K: CameraIntrinsics, uv) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ray generation.

    Returns world origins (N, 3), unit world directions (N, 3) and, per ray,
    the cosine between the ray and the optical axis: multiplying a distance
    along the ray by it gives camera-frame z.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    d_cam = camera_directions(uv, K)
    dirs = d_cam @ pose.R.T
    origins = np.broadcast_to(pose.t, dirs.shape).copy()
    return origins, dirs, d_cam[:, 2].copy()


def generate_rays(pose: Pose, K: CameraIntrinsics, pixels: Iterable, near: float = 0.05,
                  far: float = 10.0) -> list[Ray]:
    uv = np.asarray(list(pixels), dtype=float).reshape(-1, 2)
    if not np.all(K.in_bounds(uv[:, 0], uv[:, 1])):
        raise ValueError("pixels must lie inside the image")
    origins, dirs, _ = ray_arrays(pose, K, uv)
    return [Ray(o, d, near, far) for o, d in zip(origins, dirs)]


def _axis_rotation(axis: int, angle_deg: float) -> Quaternion:
    a = np.zeros(3)
    a[axis] = 1.0
    return Quaternion.from_axis_angle(a, math.radians(angle_deg))


def signed_angles(angles_deg: Sequence[float]) -> list[float]:
    out = []
    for a in angles_deg:
        for s in (abs(float(a)), -abs(float(a))):
            if s == 0.0:
                s = 0.0
            if s not in out:
                out.append(s)
    return out


def spin_pose_grid(pose: Pose, angles_deg: Sequence[float]) -> list[Pose]:
    """Rotations about the camera centre over the signed angle set per axis.

    Rotations are about the camera's own axes, applied x first, then y, then z,
    so ``len(result) == len(signed_angles(angles_deg)) ** 3``.
    """
    if len(angles_deg) == 0:
        raise ValueError("angles_deg must be non-empty")
    A = signed_angles(angles_deg)
    poses = []
    for ax, ay, az in itertools.product(A, A, A):
        local = _axis_rotation(2, az) * _axis_rotation(1, ay) * _axis_rotation(0, ax)
        poses.append(Pose(pose.rotation * local, pose.translation))
    return poses


def helix_poses(a: Pose, b: Pose, n: int) -> list[Pose]:
    """``n`` poses strictly between ``a`` and ``b``: slerped rotation, lerped translation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for k in range(1, n + 1):
        u = k / (n + 1)
        out.append(Pose(slerp(a.rotation, b.rotation, u), (1 - u) * a.t + u * b.t))
    return out


def look_at(position, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera at ``position`` looking at ``target``; ``up`` maps to image -y."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    y = -np.asarray(up, dtype=float)
    y = y - (y @ z) * z
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        raise ValueError("up vector parallel to viewing direction")
    y /= ny
    x = np.cross(y, z)
    return Pose.from_matrix(np.block([[np.stack([x, y, z], axis=1), position[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))
