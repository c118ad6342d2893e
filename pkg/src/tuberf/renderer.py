"""Discretized volume rendering along rays, plus image/depth file IO.

A field is anything with ``radiance(points, dirs, active_stages) -> (color, sigma)``
returning tensors of shape (N, 3) and (N,), where ``sigma`` is optical density
per world unit. ``points`` holds R*S rows ordered ray-major and ``dirs`` one
row per ray.

Samples sit at the left edge of ``S`` equal bins over ``[near, far]`` (a uniform
offset inside each bin when jitter is on); each sample's density holds until
the next sample and the last one until ``far``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CameraIntrinsics, Pose, Ray, ray_arrays


@dataclass
class RenderConfig:
    samples_per_ray: int = 128
    stratified_jitter: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    white_background: bool = False
    chunk: int = 4096

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")

    @property
    def background_color(self) -> np.ndarray:
        return np.ones(3) if self.white_background else np.asarray(self.background, dtype=float)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: float
    transmittance: np.ndarray
    weights: np.ndarray
    final_transmittance: float
    t_vals: np.ndarray
    sigma: np.ndarray


@dataclass
class RenderBatch:
    """Differentiable per-ray results for a batch of R rays with S samples."""

    color: Tensor            # (R, 3)
    depth: Tensor            # (R,) expected termination distance along the ray
    weights: Tensor          # (R, S)
    transmittance: Tensor    # (R, S) transmittance reaching each sample
    final_transmittance: Tensor  # (R,)
    sigma: Tensor            # (R, S)
    t_vals: np.ndarray       # (R, S)
    points: np.ndarray       # (R, S, 3)
    dirs: np.ndarray         # (R, 3)
    deltas: np.ndarray = None  # (R, S) interval lengths


def sample_distances(n_rays: int, near, far, samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    near = np.broadcast_to(np.asarray(near, dtype=float), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=float), (n_rays,))
    width = (far - near) / samples
    u = np.zeros((n_rays, samples)) if rng is None else rng.random((n_rays, samples))
    return near[:, None] + (np.arange(samples)[None, :] + u) * width[:, None]


def render_rays(field, origins, dirs, near, far, config: RenderConfig, active_stages: int | None = None,
                rng: np.random.Generator | None = None) -> RenderBatch:
    """Composite ``field`` along a batch of rays; differentiable when a tape is active."""
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    R = len(origins)
    S = config.samples_per_ray
    far_arr = np.broadcast_to(np.asarray(far, dtype=float), (R,))
    t = sample_distances(R, near, far, S, rng if config.stratified_jitter else None)
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far_arr - t[:, -1]
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    color, sigma = field.radiance(points.reshape(-1, 3), dirs, active_stages)
    sigma = ad.reshape(sigma, (R, S))
    color = ad.reshape(color, (R, S, 3))
    optical = sigma * delta
    cum = ad.cumsum(optical, axis=-1)
    trans = ad.exp(ad.neg(cum - optical))
    alpha = 1.0 - ad.exp(ad.neg(optical))
    weights = trans * alpha
    final_t = ad.exp(ad.neg(cum[:, S - 1]))
    rgb = ad.sum(ad.broadcast_to(ad.reshape(weights, (R, S, 1)), (R, S, 3)) * color, axis=1)
    bg = config.background_color
    if np.any(bg != 0):
        rgb = rgb + ad.broadcast_to(ad.reshape(final_t, (R, 1)), (R, 3)) * bg
    wsum = ad.sum(weights, axis=1)
    depth = ad.sum(weights * t, axis=1) / ad.maximum(wsum, 1e-8)
    return RenderBatch(rgb, depth, weights, trans, final_t, sigma, t, points, dirs, delta)


def render_ray(field, ray: Ray, config: RenderConfig, active_stages: int | None = None,
               rng: np.random.Generator | None = None) -> RenderOutput:
    b = render_rays(field, np.asarray(ray.origin)[None], np.asarray(ray.direction)[None], ray.near, ray.far,
                    config, active_stages, rng)
    return RenderOutput(
        color=b.color.data[0].copy(), depth=float(b.depth.data[0]), transmittance=b.transmittance.data[0].copy(),
        weights=b.weights.data[0].copy(), final_transmittance=float(b.final_transmittance.data[0]),
        t_vals=b.t_vals[0].copy(), sigma=b.sigma.data[0].copy())


def ray_transmittance_targets(output, sample_positions=None) -> np.ndarray:
    """Transmittance reaching each sample, detached (plain arrays).

    With ``sample_positions`` given, transmittance is evaluated at those
    distances under the same piecewise-constant density.
    """
    if isinstance(output, RenderBatch):
        trans, t, sigma = output.transmittance.data, output.t_vals, output.sigma.data
    else:
        trans, t, sigma = output.transmittance, output.t_vals, output.sigma
    trans = np.array(trans, dtype=float)
    if sample_positions is None:
        return trans
    pos = np.asarray(sample_positions, dtype=float)
    t2 = np.atleast_2d(t)
    s2 = np.atleast_2d(sigma)
    tr2 = np.atleast_2d(trans)
    p2 = np.atleast_2d(pos)
    out = np.empty(p2.shape)
    for r in range(len(p2)):
        j = np.clip(np.searchsorted(t2[r], p2[r], side="right") - 1, 0, t2.shape[1] - 1)
        before = p2[r] < t2[r, 0]
        out[r] = np.where(before, 1.0, tr2[r, j] * np.exp(-s2[r, j] * (p2[r] - t2[r, j])))
    return out.reshape(pos.shape)


def render_image(field, pose: Pose, K: CameraIntrinsics, config: RenderConfig, active_stages: int | None = None,
                 near: float = 0.05, far: float = 10.0, rng: np.random.Generator | None = None,
                 return_weights: bool = False):
    """Render RGB (H, W, 3) and camera-z depth (H, W) for every pixel."""
    uv = K.pixel_grid()
    origins, dirs, cosz = ray_arrays(pose, K, uv)
    n = len(uv)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    extra = [] if return_weights else None
    for s in range(0, n, config.chunk):
        e = min(n, s + config.chunk)
        b = render_rays(field, origins[s:e], dirs[s:e], near, far, config, active_stages, rng)
        rgb[s:e] = b.color.data
        depth[s:e] = b.depth.data * cosz[s:e]
        if extra is not None:
            extra.append(b)
    rgb = rgb.reshape(K.height, K.width, 3)
    depth = depth.reshape(K.height, K.width)
    if return_weights:
        return rgb, depth, extra
    return rgb, depth


# --------------------------------------------------------------------- file IO

def write_png(path, rgb: np.ndarray):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, mask: np.ndarray):
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8)).save(path)


def write_pfm(path, depth: np.ndarray):
    """Single-channel little-endian float32 PFM; rows stored bottom-to-top per the format."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline().strip())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_depth_png16(path, depth: np.ndarray, scale: float = 1000.0):
    """16-bit PNG depth with a JSON sidecar giving the metres-per-count scale."""
    from PIL import Image

    counts = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(counts).save(path)
    path.with_suffix(".json").write_text(json.dumps({"scale": scale}))


def read_depth_png16(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / float(meta["scale"])


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pfm":
        return read_pfm(path)
    if path.suffix == ".png":
        return read_depth_png16(path)
    raise ValueError(f"{path}: unsupported depth format")


__all__ = [
    "RenderConfig", "RenderOutput", "RenderBatch", "render_rays", "render_ray", "render_image",
    "ray_transmittance_targets", "sample_distances", "write_png", "read_png", "write_pfm", "read_pfm",
    "write_depth_png16", "read_depth_png16", "read_depth", "write_mask_png",
]
