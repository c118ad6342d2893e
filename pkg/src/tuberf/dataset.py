"""Procedural tube phantoms with exact ground truth, dataset IO and train/test splits.

The tube wall is the zero set of ``dist(p, centreline) - radius(s)`` where the
centreline is a densely sampled Catmull-Rom curve (the polyline itself is the
reference geometry) and ``radius(s)`` carries sinusoidal folds. Ends are
closed by hemispherical caps. Wall colour is a view-independent procedural
albedo over arc length and angle around the centreline.

On-disk layout::

    poses.json        intrinsics, near/far, per-frame camera_to_world (16 row-major reals)
    rgb/%06d.png      8-bit RGB
    depth/%06d.pfm    camera-z depth, float32 PFM (16-bit PNG + JSON sidecar also read)
    phantom.json      generator configuration
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Pose, Quaternion, project_points, ray_arrays
from .renderer import read_depth, read_png, write_pfm, write_png

DATASET_FORMAT = "tuberf-dataset"
DATASET_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class TubePhantomConfig:
    control_points: list = field(default_factory=lambda: [[0, 0, 0], [0, 0, 6], [0, 0, 12]])
    base_radius: float = 1.0
    fold_amplitude: float = 0.08
    fold_frequency: float = 0.8
    fold_phase: float = 0.0
    texture_seed: int = 0
    texture_components: int = 4
    texture_strength: float = 0.14
    frames: int = 120
    camera_start: float = 1.0
    camera_end: float | None = None
    camera_offset: tuple = (0.0, 0.0)
    camera_wobble: float = 0.0
    wobble_frequency: float = 0.5
    look_ahead: float = 1.5
    width: int = 96
    height: int = 96
    fov_deg: float = 90.0
    near: float = 0.05
    far: float | None = None
    samples_per_unit: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["control_points"] = [list(map(float, p)) for p in self.control_points]
        d["camera_offset"] = list(self.camera_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TubePhantomConfig:
        d = dict(d)
        if "camera_offset" in d:
            d["camera_offset"] = tuple(d["camera_offset"])
        return cls(**d)


def _catmull_rom(points: np.ndarray, samples_per_unit: int) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        raise ValueError("need at least two control points")
    ext = np.vstack([2 * p[0] - p[1], p, 2 * p[-1] - p[-2]])
    out = []
    for i in range(1, len(ext) - 2):
        p0, p1, p2, p3 = ext[i - 1], ext[i], ext[i + 1], ext[i + 2]
        n = max(2, int(math.ceil(np.linalg.norm(p2 - p1) * samples_per_unit)))
        u = np.linspace(0, 1, n, endpoint=False)[:, None]
        seg = 0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2
                     + (-p0 + 3 * p1 - 3 * p2 + p3) * u**3)
        out.append(seg)
    out.append(p[-1:])
    return np.vstack(out)


class TubePhantom:
    """Analytic tube scene: wall function, ray intersection and frame rendering."""

    def __init__(self, config: TubePhantomConfig):
        self.config = config
        c = _catmull_rom(np.asarray(config.control_points, dtype=float), config.samples_per_unit)
        seg = np.diff(c, axis=0)
        keep = np.concatenate([[True], np.linalg.norm(seg, axis=1) > 1e-12])
        c = c[keep]
        self.vertices = c
        seg = np.diff(c, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.seg_dir = seg / self.seg_len[:, None]
        self.arc = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.arc[-1])
        # rotation-minimizing frame per segment
        T = self.seg_dir
        ref = np.array([1.0, 0, 0]) if abs(T[0, 0]) < 0.9 else np.array([0, 1.0, 0])
        N = np.empty_like(T)
        n0 = ref - (ref @ T[0]) * T[0]
        N[0] = n0 / np.linalg.norm(n0)
        for i in range(1, len(T)):
            n = N[i - 1] - (N[i - 1] @ T[i]) * T[i]
            N[i] = n / np.linalg.norm(n)
        self.seg_normal = N
        self.seg_binormal = np.cross(T, N)
        self.tree = cKDTree(c)
        rng = np.random.default_rng(config.texture_seed)
        k = config.texture_components
        self._tex_freq = rng.uniform(0.25, 1.2, size=k)
        self._tex_ang = rng.integers(1, 4, size=k) * rng.choice([-1, 1], size=k)
        self._tex_phase = rng.uniform(0, 2 * np.pi, size=k)
        self._tex_color = rng.normal(size=(k, 3))
        self._tex_color /= np.linalg.norm(self._tex_color, axis=1, keepdims=True)

    # ----------------------------------------------------------------- shape
    def radius(self, s) -> np.ndarray:
        c = self.config
        return c.base_radius * (1.0 + c.fold_amplitude * np.sin(2 * np.pi * c.fold_frequency * np.asarray(s) + c.fold_phase))

    def centerline(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        i = np.clip(np.searchsorted(self.arc, s, side="right") - 1, 0, len(self.seg_len) - 1)
        return self.vertices[i] + (s - self.arc[i])[..., None] * self.seg_dir[i]

    def frame_at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        i = np.clip(np.searchsorted(self.arc, s, side="right") - 1, 0, len(self.seg_len) - 1)
        return self.seg_dir[i], self.seg_normal[i], self.seg_binormal[i]

    def closest(self, p: np.ndarray):
        """Distance to the centreline, arc length, segment index and offset vector for points (N, 3)."""
        p = np.asarray(p, dtype=float)
        _, vi = self.tree.query(p)
        nseg = len(self.seg_len)
        best_d = np.full(len(p), np.inf)
        best_s = np.zeros(len(p))
        best_i = np.zeros(len(p), dtype=np.int64)
        best_off = np.zeros_like(p)
        for cand in (vi - 1, vi):
            i = np.clip(cand, 0, nseg - 1)
            rel = p - self.vertices[i]
            u = np.clip(np.einsum("ij,ij->i", rel, self.seg_dir[i]), 0.0, self.seg_len[i])
            off = rel - u[:, None] * self.seg_dir[i]
            d = np.linalg.norm(off, axis=1)
            better = d < best_d
            best_d = np.where(better, d, best_d)
            best_s = np.where(better, self.arc[i] + u, best_s)
            best_i = np.where(better, i, best_i)
            best_off = np.where(better[:, None], off, best_off)
        return best_d, best_s, best_i, best_off

    def wall(self, p: np.ndarray) -> np.ndarray:
        """Signed wall function: negative inside the tube."""
        d, s, _, _ = self.closest(p)
        return d - self.radius(s)

    def surface_coords(self, p: np.ndarray):
        _, s, i, off = self.closest(p)
        theta = np.arctan2(np.einsum("ij,ij->i", off, self.seg_binormal[i]),
                           np.einsum("ij,ij->i", off, self.seg_normal[i]))
        return s, theta

    def albedo(self, s, theta) -> np.ndarray:
        s = np.asarray(s, dtype=float)[..., None]
        theta = np.asarray(theta, dtype=float)[..., None]
        c = self.config
        base = np.array([0.74, 0.42, 0.38])
        waves = np.sin(2 * np.pi * self._tex_freq * s + self._tex_ang * theta + self._tex_phase)
        col = base + c.texture_strength * waves @ self._tex_color
        fold = np.sin(2 * np.pi * c.fold_frequency * s[..., 0] + c.fold_phase)
        col = col * (0.86 + 0.14 * fold)[..., None]
        return np.clip(col, 0.02, 0.98)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, t_max: float | None = None, tol: float = 1e-6):
        """Distance along each ray to the first wall crossing (bracketing march + bisection)."""
        origins = np.asarray(origins, dtype=float)
        dirs = np.asarray(dirs, dtype=float)
        n = len(origins)
        t_max = t_max or (self.length + 4 * self.config.base_radius)
        if np.any(self.wall(origins) >= 0):
            raise DatasetError("ray origin outside the tube")
        lo = np.zeros(n)
        hi = np.full(n, np.nan)
        active = np.arange(n)
        lipschitz = 1.5
        min_step = 2e-3
        t = np.zeros(n)
        for _ in range(10000):
            if len(active) == 0:
                break
            f = self.wall(origins[active] + t[active, None] * dirs[active])
            inside = f < 0
            lo[active[inside]] = t[active[inside]]
            hit = active[~inside]
            hi[hit] = t[hit]
            active = active[inside]
            step = np.maximum(-f[inside] / lipschitz, min_step)
            t[active] += step
            over = t[active] > t_max
            if np.any(over):
                raise DatasetError("ray escaped the tube without hitting the wall")
        for _ in range(64):
            if np.all(hi - lo <= tol):
                break
            mid = 0.5 * (lo + hi)
            f = self.wall(origins + mid[:, None] * dirs)
            inside = f < 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return 0.5 * (lo + hi)

    def render(self, pose: Pose, K: CameraIntrinsics):
        """Ground-truth RGB (H, W, 3) and camera-z depth (H, W)."""
        origins, dirs, cosz = ray_arrays(pose, K, K.pixel_grid())
        t = self.intersect(origins, dirs)
        pts = origins + t[:, None] * dirs
        s, th = self.surface_coords(pts)
        rgb = self.albedo(s, th).reshape(K.height, K.width, 3)
        return rgb, (t * cosz).reshape(K.height, K.width)

    # ---------------------------------------------------------------- camera
    def intrinsics(self) -> CameraIntrinsics:
        c = self.config
        return CameraIntrinsics.from_fov(c.width, c.height, c.fov_deg)

    def camera_poses(self) -> list[Pose]:
        c = self.config
        end = c.camera_end if c.camera_end is not None else self.length - c.look_ahead - 1.0
        s_vals = np.linspace(c.camera_start, end, c.frames)
        poses = []
        for i, s in enumerate(s_vals):
            _, N, B = self.frame_at(s)
            off = c.base_radius * (c.camera_offset[0] * N + c.camera_offset[1] * B)
            w = c.base_radius * c.camera_wobble
            if w:
                ang = 2 * np.pi * c.wobble_frequency * s
                off = off + w * (np.cos(ang) * N + np.sin(ang) * B)
            pos = self.centerline(s) + off
            target = self.centerline(s + c.look_ahead)
            z = target - pos
            z /= np.linalg.norm(z)
            y = -(N - (N @ z) * z)
            y /= np.linalg.norm(y)
            x = np.cross(y, z)
            pose = Pose(Quaternion.from_matrix(np.stack([x, y, z], axis=1)), pos)
            if self.wall(pose.t[None])[0] >= -0.05 * c.base_radius:
                raise DatasetError(f"frame {i}: camera at s={s:.3f} is not strictly inside the tube")
            poses.append(pose)
        return poses


# -------------------------------------------------------------------- presets

def _arc_points(straight_a: float, turn_deg: float, bend_radius: float, straight_b: float,
                axis_turn=(1.0, 0.0, 0.0), step: float = 0.5) -> list:
    pts = [np.array([0.0, 0.0, z]) for z in np.arange(0.0, straight_a, step)]
    start = np.array([0.0, 0.0, straight_a])
    turn = math.radians(turn_deg)
    side = np.asarray(axis_turn, dtype=float)
    centre = start + bend_radius * side
    n_arc = max(2, int(math.ceil(bend_radius * turn / step)))
    for a in np.linspace(0, turn, n_arc + 1):
        pts.append(centre - bend_radius * math.cos(a) * side + bend_radius * math.sin(a) * np.array([0, 0, 1.0]))
    end = pts[-1]
    direction = math.sin(turn) * side + math.cos(turn) * np.array([0, 0, 1.0])
    for d in np.arange(step, straight_b + 1e-9, step):
        pts.append(end + d * direction)
    out = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - out[-1]) > 1e-6:
            out.append(p)
    return [list(map(float, p)) for p in out]


def _helix_points(amplitude: float, pitch: float, length: float, step: float = 0.25) -> list:
    z = np.arange(0.0, length + 1e-9, step)
    w = 2 * np.pi / pitch
    return [[float(amplitude * np.cos(w * v) - amplitude), float(amplitude * np.sin(w * v)), float(v)] for v in z]


PRESETS = {
    "straight-tube": dict(control_points=[[0, 0, 0], [0, 0, 4], [0, 0, 8], [0, 0, 12]]),
    # a coiled centreline keeps the line of sight short (depth < 5 radii) everywhere
    "curved-tube": dict(control_points=_helix_points(1.2, 8.0, 12.0), camera_wobble=0.1, look_ahead=1.0),
    "l-tube": dict(control_points=_arc_points(10.0, 90.0, 1.5, 10.0), frames=200, camera_start=1.0),
    "s-tube": dict(control_points=[[0, 0, 0], [0, 0, 4], [1.5, 0, 8], [0, 0, 12], [0, 0, 16]], camera_wobble=0.1),
}


def preset_config(name: str, **overrides) -> TubePhantomConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return TubePhantomConfig(**kw)


# -------------------------------------------------------------------- dataset

@dataclass
class Frame:
    id: int
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray


@dataclass
class Dataset:
    frames: list
    intrinsics: CameraIntrinsics
    near: float
    far: float
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def by_id(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(f"frame {frame_id} not in dataset")

    def subset(self, frames: Sequence[Frame]) -> Dataset:
        return Dataset(list(frames), self.intrinsics, self.near, self.far, dict(self.meta))


def _quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(rgb * 255.0), 0, 255) / 255.0


def _render_frame(args):
    config, pose = args
    ph = TubePhantom(config)
    return ph.render(pose, ph.intrinsics())


def generate_phantom(config: TubePhantomConfig, out_dir=None, jobs: int = 1) -> Dataset:
    """Render every frame analytically; optionally write the dataset layout to ``out_dir``.

    Stored images are quantized exactly as they are written (8-bit RGB,
    float32 depth), so a write/load round trip is lossless.
    """
    phantom = TubePhantom(config)
    K = phantom.intrinsics()
    poses = phantom.camera_poses()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            renders = list(ex.map(_render_frame, [(config, p) for p in poses]))
    else:
        renders = [phantom.render(p, K) for p in poses]
    frames = []
    for i, (pose, (rgb, depth)) in enumerate(zip(poses, renders)):
        frames.append(Frame(i, pose, _quantize_rgb(rgb), depth.astype(np.float32).astype(np.float64)))
    far = config.far
    if far is None:
        _, _, cosz = ray_arrays(Pose.identity(), K, K.pixel_grid())
        longest = max(float(np.max(f.depth.ravel() / cosz)) for f in frames)
        far = float(np.ceil(longest * 1.05 * 4) / 4)
    ds = Dataset(frames, K, float(config.near), float(far), {"phantom": config.to_dict()})
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in ds.frames:
        rgb_rel = f"rgb/{f.id:06d}.png"
        depth_rel = f"depth/{f.id:06d}.pfm"
        write_png(out / rgb_rel, f.rgb)
        write_pfm(out / depth_rel, f.depth)
        entries.append({
            "id": int(f.id),
            "camera_to_world": [float(v) for v in f.pose.matrix().ravel()],
            "quaternion_wxyz": [float(v) for v in f.pose.rotation.as_array()],
            "translation": [float(v) for v in f.pose.translation],
            "rgb": rgb_rel,
            "depth": depth_rel,
        })
    doc = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "intrinsics": ds.intrinsics.to_dict(),
           "near": ds.near, "far": ds.far, "frames": entries}
    (out / "poses.json").write_text(json.dumps(doc, indent=1))
    if "phantom" in ds.meta:
        (out / "phantom.json").write_text(json.dumps(ds.meta["phantom"], indent=1))


def _pose_from_entry(e: dict, path) -> Pose:
    m = np.asarray(e["camera_to_world"], dtype=float)
    if m.shape != (16,):
        raise DatasetError(f"{path}: frame {e.get('id')} camera_to_world must have 16 values")
    m = m.reshape(4, 4)
    if "quaternion_wxyz" in e and "translation" in e:
        pose = Pose(Quaternion(*e["quaternion_wxyz"]), e["translation"])
        if np.max(np.abs(pose.matrix() - m)) > 1e-6:
            raise DatasetError(f"{path}: frame {e['id']} quaternion disagrees with camera_to_world")
        return pose
    return Pose.from_matrix(m)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    pj = d / "poses.json"
    if not pj.exists():
        raise DatasetError(f"{pj}: missing")
    try:
        doc = json.loads(pj.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{pj}: corrupt JSON ({e})") from e
    K = CameraIntrinsics.from_dict(doc["intrinsics"])
    entries = sorted(doc["frames"], key=lambda e: int(e["id"]))
    ids = [int(e["id"]) for e in entries]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{pj}: duplicate frame ids")
    n_rgb = len(list((d / "rgb").glob("*.png"))) if (d / "rgb").is_dir() else 0
    if n_rgb != len(entries):
        raise DatasetError(f"{d}: {len(entries)} poses but {n_rgb} RGB images")
    frames = []
    for e in entries:
        rgb_path = d / e.get("rgb", f"rgb/{int(e['id']):06d}.png")
        depth_path = d / e.get("depth", f"depth/{int(e['id']):06d}.pfm")
        for p in (rgb_path, depth_path):
            if not p.exists():
                raise DatasetError(f"{p}: missing")
        try:
            rgb = read_png(rgb_path)
            depth = read_depth(depth_path)
        except Exception as ex:  # noqa: BLE001
            raise DatasetError(f"{rgb_path if 'rgb' not in locals() else depth_path}: unreadable ({ex})") from ex
        if rgb.shape != (K.height, K.width, 3) or depth.shape != (K.height, K.width):
            raise DatasetError(f"{rgb_path}: dimensions do not match intrinsics {K.width}x{K.height}")
        frames.append(Frame(int(e["id"]), _pose_from_entry(e, pj), rgb, depth))
    meta = {}
    if (d / "phantom.json").exists():
        meta["phantom"] = json.loads((d / "phantom.json").read_text())
    far = doc.get("far")
    if far is None:
        far = float(max(f.depth.max() for f in frames) * 1.5)
    return Dataset(frames, K, float(doc.get("near", 0.05)), float(far), meta)


# ---------------------------------------------------------------------- split

@dataclass
class SplitSpec:
    """Index-based train/test protocol.

    By default every ``test_every``-th frame is held out, starting at
    ``test_every // 2`` so both trajectory ends stay in training. Setting
    ``test_count`` spreads that many test frames evenly (for protocols that
    are only approximately one-in-N); ``indices`` overrides everything.
    """

    test_every: int = 4
    test_count: int | None = None
    indices: list | None = None

    def __post_init__(self):
        if self.test_every < 2:
            raise ValueError("test_every must be >= 2")

    @classmethod
    def simcol(cls) -> SplitSpec:
        return cls(test_every=4, test_count=233)

    @classmethod
    def c3vd(cls) -> SplitSpec:
        return cls(test_every=4, test_count=19)

    def test_indices(self, n: int) -> list[int]:
        if self.indices is not None:
            return sorted(set(int(i) for i in self.indices))
        count = self.test_count if self.test_count is not None else n // self.test_every
        return sorted({int(math.floor((k + 0.5) * n / count)) for k in range(count)})


def split(frames: Sequence, spec: SplitSpec | None = None) -> tuple[list, list]:
    spec = spec or SplitSpec()
    frames = list(frames)
    if len(frames) < spec.test_every and spec.indices is None:
        raise ValueError(f"need at least {spec.test_every} frames to split")
    test_idx = set(spec.test_indices(len(frames)))
    train = [f for i, f in enumerate(frames) if i not in test_idx]
    test = [f for i, f in enumerate(frames) if i in test_idx]
    return train, test


def reproject_consistency(phantom: TubePhantom, frame_a: Frame, frame_b: Frame, K: CameraIntrinsics,
                          n: int = 500, seed: int = 0) -> np.ndarray:
    """Round-trip pixel error for random pixels of ``frame_a``.

    Each pixel is lifted to the wall with the stored depth, projected into
    ``frame_b``, re-intersected analytically along frame b's ray through that
    sub-pixel location, and the hit is projected back into frame a. Pixels
    that leave frame b's image are skipped.
    """
    from .geometry import backproject_pixels, inverse

    rng = np.random.default_rng(seed)
    uv = np.stack([rng.integers(0, K.width, n), rng.integers(0, K.height, n)], axis=1).astype(float)
    z = frame_a.depth[uv[:, 1].astype(int), uv[:, 0].astype(int)]
    pts_w = frame_a.pose.apply(backproject_pixels(uv, z, K))
    proj, ok = project_points(inverse(frame_b.pose).apply(pts_w), K)
    o, d, _ = ray_arrays(frame_b.pose, K, proj[ok])
    hit = o + phantom.intersect(o, d)[:, None] * d
    back, _ = project_points(inverse(frame_a.pose).apply(hit), K)
    return np.linalg.norm(back - uv[ok], axis=1)
