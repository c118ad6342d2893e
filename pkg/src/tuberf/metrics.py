"""Image and depth metrics that need no pretrained networks, plus evaluation reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 120.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03


def _check_same(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give the 120 dB cap."""
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    return convolve2d(convolve2d(img, g[None, :], mode="valid"), g[:, None], mode="valid")


def _ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, size: int = 11, sigma: float = 1.5):
    """Mean luminance-contrast-structure SSIM and mean contrast-structure term for one channel."""
    g = gaussian_window(size, sigma)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a**2
    sbb = _filter(b * b, g) - mu_b**2
    sab = _filter(a * b, g) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _channels(x: np.ndarray) -> list[np.ndarray]:
    return [x] if x.ndim == 2 else [x[..., c] for c in range(x.shape[-1])]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-windowed (11x11, sigma 1.5) SSIM averaged over channels."""
    a, b = _check_same(a, b)
    if min(a.shape[:2]) < 11:
        raise ValueError("SSIM needs images of at least 11x11")
    return float(np.mean([_ssim_terms(x, y, data_range)[0] for x, y in zip(_channels(a), _channels(b))]))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def usable_scales(shape, scales: int = 5, size: int = 11) -> int:
    m = min(shape[:2])
    s = scales
    while s > 1 and m < 2 ** (s - 1) * size:
        s -= 1
    return s


def ms_ssim(a, b, scales: int = 5, data_range: float = 1.0, return_info: bool = False):
    """Multi-scale SSIM with the canonical scale weights.

    Images too small for ``scales`` levels use as many as fit, with the
    weights of the kept levels renormalized; ``info["warning"]`` says so.
    Negative contrast-structure terms are clamped to zero before the power.
    """
    a, b = _check_same(a, b)
    if min(a.shape[:2]) < 11:
        raise ValueError("MS-SSIM needs images of at least 11x11")
    used = usable_scales(a.shape, scales)
    weights = np.asarray(MS_SSIM_WEIGHTS[:used] if scales == 5 else np.full(scales, 1.0 / scales)[:used])
    weights = weights / weights.sum()
    info = {"scales": used, "warning": None}
    if used < scales:
        info["warning"] = f"image {a.shape[0]}x{a.shape[1]} supports {used} of {scales} scales; weights renormalized"
    values = []
    for x, y in zip(_channels(a), _channels(b)):
        out = 1.0
        for s in range(used):
            full, cs = _ssim_terms(x, y, data_range)
            term = full if s == used - 1 else cs
            out *= max(term, 0.0) ** weights[s]
            if s < used - 1:
                x, y = _downsample(x), _downsample(y)
        values.append(out)
    v = float(np.mean(values))
    return (v, info) if return_info else v


def depth_mse(a, b, mask=None) -> float:
    """Masked mean squared depth error (world units squared)."""
    a, b = _check_same(a, b)
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ValueError(f"mask shape {m.shape} != depth shape {a.shape}")
    if not m.any():
        raise ValueError("depth_mse: mask selects no pixels")
    d = a[m] - b[m]
    return float(np.mean(d * d))


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    frames: list = field(default_factory=list)
    config_hash: str = ""
    warnings: list = field(default_factory=list)

    METRICS = ("psnr", "ssim", "ms_ssim", "depth_mse")
    RESERVED = ("lpips_vgg", "lpips_alex")

    def add(self, frame_id: int, rgb, gt_rgb, depth=None, gt_depth=None, depth_mask=None):
        v, info = ms_ssim(rgb, gt_rgb, return_info=True)
        if info["warning"] and info["warning"] not in self.warnings:
            self.warnings.append(info["warning"])
        row = {"frame": int(frame_id), "psnr": psnr(rgb, gt_rgb), "ssim": ssim(rgb, gt_rgb), "ms_ssim": v,
               "depth_mse": None}
        if depth is not None and gt_depth is not None:
            mask = (np.asarray(gt_depth) > 0) if depth_mask is None else depth_mask
            row["depth_mse"] = depth_mse(depth, gt_depth, mask)
        for k in self.RESERVED:
            row[k] = None
        self.frames.append(row)
        return row

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def mean(self, metric: str) -> float | None:
        vals = [r[metric] for r in self.frames if r[metric] is not None]
        return float(np.mean(vals)) if vals else None

    def means(self) -> dict:
        return {m: self.mean(m) for m in self.METRICS}

    def to_dict(self) -> dict:
        return {"frame_count": self.frame_count, "config_hash": self.config_hash, "means": self.means(),
                "warnings": list(self.warnings), "frames": self.frames}

    def write_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def write_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        cols = ["frame", *self.METRICS, *self.RESERVED]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in self.frames:
                w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
            means = self.means()
            w.writerow(["mean", *[("" if means[m] is None else repr(means[m])) for m in self.METRICS],
                        *["" for _ in self.RESERVED]])
