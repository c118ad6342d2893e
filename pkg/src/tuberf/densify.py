"""Pose densification: forward warping of RGB-D frames into synthesized poses.

A source pixel with depth is lifted to 3D, moved into the destination camera
and splatted to the nearest destination pixel; when several land on the same
pixel the nearest one wins. Destination pixels nobody lands on are invalid and
carry depth 0.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (CameraIntrinsics, Pose, backproject_pixels, camera_directions, compose, helix_poses,
                       inverse, project_points, spin_pose_grid)
from .renderer import read_pfm, read_png, write_mask_png, write_pfm, write_png

SPIN_ANGLES = (5.0, 2.5, 1.25)
SPIN_RAYS = 3136

# clamp events when a pool holds fewer rays than requested
WARNINGS = Counter()


@dataclass
class PseudoLabel:
    pose: Pose
    rgb: np.ndarray      # (H, W, 3); zeros where invalid
    depth: np.ndarray    # (H, W) camera-z; 0 where invalid
    valid: np.ndarray    # (H, W) bool
    source_frame: int
    family: str          # "spin" | "helix"

    def __post_init__(self):
        if self.family not in ("spin", "helix"):
            raise ValueError(f"unknown pseudo-label family {self.family!r}")


def warp_indices(src_depth: np.ndarray, src_pose: Pose, dst_pose: Pose, K: CameraIntrinsics,
                 src_valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Splat correspondences: (source flat index, destination flat index, destination z), z-buffered."""
    depth = np.asarray(src_depth, dtype=float).reshape(-1)
    ok = depth > 0
    if src_valid is not None:
        ok &= np.asarray(src_valid, dtype=bool).reshape(-1)
    src_idx = np.flatnonzero(ok)
    uv = K.pixel_grid()[src_idx]
    pts = backproject_pixels(uv, depth[src_idx], K)
    rel = compose(inverse(dst_pose), src_pose)
    pc = rel.apply(pts)
    proj, inside = project_points(pc, K)
    src_idx, proj, z = src_idx[inside], proj[inside], pc[inside, 2]
    iu = np.floor(proj[:, 0] + 0.5).astype(np.int64)
    iv = np.floor(proj[:, 1] + 0.5).astype(np.int64)
    dst_idx = iv * K.width + iu
    # nearest wins: stable sort by depth, keep the first hit per destination pixel
    order = np.lexsort((src_idx, z))
    dst_sorted = dst_idx[order]
    _, first = np.unique(dst_sorted, return_index=True)
    keep = order[first]
    return src_idx[keep], dst_idx[keep], z[keep]


def warp(src_rgb, src_depth, src_pose: Pose, dst_pose: Pose, K: CameraIntrinsics, src_valid=None,
         source_frame: int = -1, family: str = "helix") -> PseudoLabel:
    """Forward-warp an RGB-D view into ``dst_pose``."""
    src_rgb = np.asarray(src_rgb, dtype=float)
    si, di, z = warp_indices(src_depth, src_pose, dst_pose, K, src_valid)
    n = K.width * K.height
    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    rgb[di] = src_rgb.reshape(-1, 3)[si]
    depth[di] = z
    valid[di] = True
    shape = (K.height, K.width)
    return PseudoLabel(dst_pose, rgb.reshape(shape + (3,)), depth.reshape(shape), valid.reshape(shape),
                       source_frame, family)


@dataclass
class SpinBatch:
    origins: np.ndarray
    dirs: np.ndarray
    cosz: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    pose_index: np.ndarray
    pixel: np.ndarray


@dataclass
class RayPool:
    """All valid warped rays of one frame over its spin poses (stored compactly)."""

    frame_id: int
    poses: list
    pose_index: np.ndarray   # int16 per ray
    pixel: np.ndarray        # int32 flat destination pixel
    rgb: np.ndarray          # float32 (N, 3)
    depth: np.ndarray        # float32 camera-z
    intrinsics: CameraIntrinsics
    seed: int = 0

    def __len__(self):
        return len(self.pixel)

    @property
    def total(self) -> int:
        return len(self.pixel)

    def rays(self, which: np.ndarray) -> SpinBatch:
        K = self.intrinsics
        pix = self.pixel[which]
        pidx = self.pose_index[which]
        uv = np.stack([pix % K.width, pix // K.width], axis=1).astype(float)
        dirs_c = camera_directions(uv, K)
        cosz = dirs_c[:, 2].copy()
        R = np.stack([p.R for p in self.poses])
        T = np.stack([p.t for p in self.poses])
        dirs = np.einsum("nij,nj->ni", R[pidx], dirs_c)
        return SpinBatch(T[pidx], dirs, cosz, self.rgb[which].astype(float), self.depth[which].astype(float),
                         pidx, pix)


def build_spin_pool(frame, K: CameraIntrinsics, angles=SPIN_ANGLES, src_valid=None, seed: int = 0) -> RayPool:
    """Warp ``frame`` into every spin-grid pose and pool the valid destination rays."""
    poses = spin_pose_grid(frame.pose, angles)
    rgb_flat = np.asarray(frame.rgb, dtype=float).reshape(-1, 3)
    p_idx, pix, rgb, dep = [], [], [], []
    for k, pose in enumerate(poses):
        si, di, z = warp_indices(frame.depth, frame.pose, pose, K, src_valid)
        order = np.argsort(di)
        p_idx.append(np.full(len(di), k, dtype=np.int16))
        pix.append(di[order].astype(np.int32))
        rgb.append(rgb_flat[si[order]].astype(np.float32))
        dep.append(z[order].astype(np.float32))
    return RayPool(int(frame.id), poses, np.concatenate(p_idx), np.concatenate(pix), np.concatenate(rgb),
                   np.concatenate(dep), K, seed)


def sample_spin_rays(pool: RayPool, count: int = SPIN_RAYS, rng: np.random.Generator | None = None) -> SpinBatch:
    """Uniform draw of ``min(count, len(pool))`` distinct rays."""
    if len(pool) == 0:
        raise ValueError(f"spin pool of frame {pool.frame_id} is empty")
    rng = rng if rng is not None else np.random.default_rng(pool.seed)
    if count >= len(pool):
        if count > len(pool):
            WARNINGS["spin_pool_clamped"] += 1
        which = np.arange(len(pool))
    else:
        which = np.sort(rng.choice(len(pool), size=count, replace=False))
    return pool.rays(which)


def spin_label(frame, K: CameraIntrinsics, pose_index: int, angles=SPIN_ANGLES) -> PseudoLabel:
    """Full pseudo-label image for one spin pose (for patch-level losses)."""
    pose = spin_pose_grid(frame.pose, angles)[pose_index]
    return warp(frame.rgb, frame.depth, frame.pose, pose, K, source_frame=int(frame.id), family="spin")


def build_helix_labels(frame_a, frame_b, K: CameraIntrinsics, n: int = 3) -> list[PseudoLabel]:
    """Warp the nearer of two consecutive frames into each intermediate helix pose."""
    labels = []
    for pose in helix_poses(frame_a.pose, frame_b.pose, n):
        da = np.linalg.norm(pose.t - frame_a.pose.t)
        db = np.linalg.norm(pose.t - frame_b.pose.t)
        src = frame_a if da <= db else frame_b
        labels.append(warp(src.rgb, src.depth, src.pose, pose, K, source_frame=int(src.id), family="helix"))
    return labels


def pose_hash(pose: Pose) -> str:
    return hashlib.sha1(np.ascontiguousarray(pose.matrix()).tobytes()).hexdigest()[:16]


class LabelCache:
    """On-disk pseudo-label store: PNG/PFM/mask triples plus a JSON manifest."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.manifest_path = self.dir / "manifest.json"
        self.entries = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}

    @staticmethod
    def key(frame_id: int, family: str, pose: Pose) -> str:
        return f"{int(frame_id)}-{family}-{pose_hash(pose)}"

    def put(self, label: PseudoLabel):
        k = self.key(label.source_frame, label.family, label.pose)
        write_png(self.dir / f"{k}.png", label.rgb)
        write_pfm(self.dir / f"{k}.pfm", label.depth)
        write_mask_png(self.dir / f"{k}.mask.png", label.valid)
        self.entries[k] = {"frame": int(label.source_frame), "family": label.family,
                           "pose": [float(v) for v in label.pose.matrix().ravel()]}
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(self.entries, indent=1, sort_keys=True))

    def get(self, frame_id: int, family: str, pose: Pose) -> PseudoLabel | None:
        k = self.key(frame_id, family, pose)
        if k not in self.entries:
            return None
        valid = read_png(self.dir / f"{k}.mask.png")[..., 0] > 0.5
        return PseudoLabel(pose, read_png(self.dir / f"{k}.png"), read_pfm(self.dir / f"{k}.pfm"), valid,
                           int(frame_id), family)
