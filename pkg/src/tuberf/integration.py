"""Blend per-block renders into one view.

For a query camera at ``P_t`` a block survives when (a) ``P_t`` lies close
enough to the line through the centres of some adjacent block pair it belongs
to and (b) the block's visibility head, averaged along the pixel's ray with
the rendering weights, reaches the visibility threshold. Survivors are blended
per pixel with inverse-distance weights ``|centre - P_t|^-eps`` renormalized
over the survivors; if nothing survives the nearest-centre block is used alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, ray_arrays
from .renderer import RenderConfig, render_rays

EXACT_HIT = 1e-9


@dataclass
class IntegrationConfig:
    epsilon: float = 2.0
    distance_threshold: float | None = None   # None: 1.5 x mean adjacent centre spacing
    visibility_threshold: float = 0.05

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.distance_threshold is not None and not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be positive")
        if not 0 < self.visibility_threshold:
            raise ValueError("visibility_threshold must be positive")

    def resolved_distance_threshold(self, centers) -> float:
        if self.distance_threshold is not None:
            return float(self.distance_threshold)
        c = np.asarray(centers, dtype=float)
        if len(c) < 2:
            return np.inf
        return 1.5 * float(np.mean(np.linalg.norm(np.diff(c, axis=0), axis=1)))


@dataclass
class BlockRender:
    block_id: int
    color: np.ndarray      # (..., 3)
    depth: np.ndarray      # (...)
    center: np.ndarray
    visibility: np.ndarray | None = None


def point_line_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    n2 = ab @ ab
    if n2 < 1e-24:
        return float(np.linalg.norm(p - a))
    return float(np.linalg.norm(np.cross(p - a, ab)) / np.sqrt(n2))


def filter_by_distance(p_t, center_a, center_b, threshold: float) -> tuple[bool, bool]:
    """Keep both blocks of an adjacent pair iff ``p_t`` is within ``threshold`` of the centre line."""
    keep = point_line_distance(p_t, center_a, center_b) < threshold
    return keep, keep


def distance_survivors(p_t, centers, threshold: float) -> np.ndarray:
    """A block survives if any adjacent pair containing it passes the line-distance test."""
    n = len(centers)
    if n == 1:
        return np.ones(1, dtype=bool)
    keep = np.zeros(n, dtype=bool)
    for i in range(n - 1):
        ka, kb = filter_by_distance(p_t, centers[i], centers[i + 1], threshold)
        keep[i] |= ka
        keep[i + 1] |= kb
    return keep


def ray_visibility(field, origins, dirs, near, far, config: RenderConfig, active_stages=None,
                   chunk: int = 4096) -> tuple[np.ndarray, list]:
    """Per-ray visibility: the block's visibility head averaged along the ray with rendering weights."""
    vis = np.empty(len(origins))
    batches = []
    for s in range(0, len(origins), chunk):
        e = min(len(origins), s + chunk)
        b = render_rays(field, origins[s:e], dirs[s:e], near, far, config, active_stages)
        v = field.visibility(b.points.reshape(-1, 3), dirs[s:e]).data.reshape(e - s, -1)
        w = b.weights.data
        vis[s:e] = np.sum(w * v, axis=1) / np.maximum(w.sum(axis=1), 1e-8)
        batches.append(b)
    return vis, batches


def filter_by_visibility(p_t, direction, field, threshold: float, near: float = 0.05, far: float = 10.0,
                         config: RenderConfig | None = None) -> bool:
    config = config or RenderConfig(samples_per_ray=64)
    v, _ = ray_visibility(field, np.asarray(p_t, float)[None], np.asarray(direction, float)[None], near, far, config)
    return bool(v[0] >= threshold)


def idw_weights(p_t, centers, epsilon: float = 2.0) -> np.ndarray:
    """Normalized inverse-distance weights; an exact hit on a centre takes all the weight."""
    if len(centers) == 0:
        raise ValueError("no surviving blocks to weight")
    d = np.linalg.norm(np.asarray(centers, dtype=float) - np.asarray(p_t, dtype=float), axis=1)
    hit = d < EXACT_HIT
    if np.any(hit):
        w = np.zeros(len(d))
        w[np.argmax(hit)] = 1.0
        return w
    # scale by the nearest distance first so large epsilon cannot underflow
    r = (d.min() / d) ** epsilon
    return r / r.sum()


def blend(renders: list, weights) -> BlockRender:
    """Pixel-wise convex combination; ``weights`` is (B,) or (B, *pixel_shape)."""
    w = np.asarray(weights, dtype=float)
    colors = np.stack([np.asarray(r.color, dtype=float) for r in renders])
    depths = np.stack([np.asarray(r.depth, dtype=float) for r in renders])
    wd = w.reshape(w.shape + (1,) * (depths.ndim - w.ndim))
    wc = w.reshape(w.shape + (1,) * (colors.ndim - w.ndim))
    return BlockRender(-1, np.sum(wc * colors, axis=0), np.sum(wd * depths, axis=0),
                       np.sum(w.reshape(len(w), -1).mean(axis=1)[:, None] * np.stack([r.center for r in renders]), 0))


def pixel_weights(p_t, centers, distance_keep: np.ndarray, visibility: np.ndarray | None, config: IntegrationConfig):
    """(B, N) blend weights per pixel after both filters, with nearest-centre fallback."""
    centers = np.asarray(centers, dtype=float)
    B = len(centers)
    n = visibility.shape[1] if visibility is not None else 1
    keep = np.broadcast_to(distance_keep[:, None], (B, n)).copy()
    if visibility is not None:
        keep &= visibility >= config.visibility_threshold
    d = np.linalg.norm(centers - np.asarray(p_t, dtype=float), axis=1)
    nearest = int(np.argmin(d))
    full = idw_weights(p_t, centers, config.epsilon)
    w = np.where(keep, full[:, None], 0.0)
    tot = w.sum(axis=0)
    empty = tot <= 0
    w[:, ~empty] /= tot[~empty]
    w[:, empty] = 0.0
    w[nearest, empty] = 1.0
    return w, keep


def render_blended(fields, centers, pose: Pose, K: CameraIntrinsics, render_config: RenderConfig,
                   config: IntegrationConfig | None = None, near: float = 0.05, far: float = 10.0,
                   active_stages=None, use_visibility: bool = True):
    """Render every block at ``pose`` and blend. Returns (rgb, depth, weights (B, H, W))."""
    config = config or IntegrationConfig()
    centers = np.asarray(centers, dtype=float)
    p_t = pose.t
    uv = K.pixel_grid()
    origins, dirs, cosz = ray_arrays(pose, K, uv)
    thr = config.resolved_distance_threshold(centers)
    dkeep = distance_survivors(p_t, centers, thr)
    renders, vis = [], []
    for i, f in enumerate(fields):
        if use_visibility and len(fields) > 1:
            v, batches = ray_visibility(f, origins, dirs, near, far, render_config, active_stages, render_config.chunk)
            vis.append(v)
        else:
            batches = [render_rays(f, origins[s:s + render_config.chunk], dirs[s:s + render_config.chunk], near, far,
                                   render_config, active_stages) for s in range(0, len(uv), render_config.chunk)]
        color = np.concatenate([b.color.data for b in batches])
        depth = np.concatenate([b.depth.data for b in batches]) * cosz
        renders.append(BlockRender(i, color, depth, centers[i]))
    visibility = np.stack(vis) if vis else None
    w, _ = pixel_weights(p_t, centers, dkeep, visibility, config)
    w = np.broadcast_to(w, (len(fields), len(uv))).copy()
    out = blend(renders, w)
    shape = (K.height, K.width)
    return out.color.reshape(shape + (3,)), out.depth.reshape(shape), w.reshape((len(fields),) + shape)
