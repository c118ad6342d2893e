"""Semantic feature extraction for the feature-matching loss.

The built-in extractor is a fixed, seeded stack of three stride-2 3x3
convolutions (total stride 8) with ReLU between layers and per-location L2
normalization. It runs on autodiff tensors so rendered images can receive
gradients through it. Precomputed features from any external network can be
loaded for target images.

External feature file: ``uint32 LE header length | JSON header | float32 LE data``
with header keys ``h, w, c, stride, frame_id``; data is (h, w, c) row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class FeatureError(RuntimeError):
    pass


@dataclass
class FeatureMap:
    height: int
    width: int
    channels: int
    data: object  # (h, w, c) ndarray or Tensor
    stride: int

    def __post_init__(self):
        arr = self.data.data if isinstance(self.data, Tensor) else np.asarray(self.data)
        if arr.shape != (self.height, self.width, self.channels):
            raise FeatureError(f"feature data shape {arr.shape} != {(self.height, self.width, self.channels)}")
        if not np.all(np.isfinite(arr)):
            raise FeatureError("feature map holds non-finite values")

    def numpy(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, Tensor) else np.asarray(self.data)


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "builtin_random_conv"
    seed: int = 0
    channels: int = 64
    stride: int = 8
    directory: str | None = None  # external features live here as %06d.feat

    def __post_init__(self):
        if self.kind not in ("builtin_random_conv", "external_precomputed"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.stride not in (2, 4, 8, 16):
            raise ValueError("stride must be a power of two between 2 and 16")
        if self.kind == "external_precomputed" and not self.directory:
            raise ValueError("external extractor needs a directory")


@lru_cache(maxsize=64)
def _im2col_index(h: int, w: int) -> tuple[np.ndarray, int, int]:
    """Row indices into the flattened zero-padded (h+2, w+2) grid for 3x3 stride-2 windows."""
    ho, wo = (h + 1) // 2, (w + 1) // 2
    oy, ox = np.meshgrid(np.arange(ho) * 2, np.arange(wo) * 2, indexing="ij")
    ky, kx = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    rows = (oy.reshape(-1, 1) + ky.reshape(1, -1)) * (w + 2) + (ox.reshape(-1, 1) + kx.reshape(1, -1))
    return rows.reshape(-1), ho, wo


class RandomConvExtractor:
    """Untrained convolutional features determined entirely by ``(seed, channels, stride)``."""

    def __init__(self, spec: ExtractorSpec | None = None):
        spec = spec or ExtractorSpec()
        self.spec = spec
        n_layers = int(np.log2(spec.stride))
        widths = [3] + [max(8, spec.channels >> (n_layers - 1 - i)) for i in range(n_layers)]
        widths[-1] = spec.channels
        rng = np.random.default_rng(spec.seed)
        self.weights = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            fan_in = 9 * cin
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cout))
            b = rng.normal(0.0, 0.1, size=cout)
            self.weights.append((Tensor(W), Tensor(b)))

    def __call__(self, image) -> Tensor:
        """(H, W, 3) image (array or tensor) -> (H/stride, W/stride, C) unit-norm features."""
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
        if x.ndim != 3 or x.shape[2] != 3:
            raise FeatureError(f"expected an (H, W, 3) image, got {x.shape}")
        h, w = x.shape[:2]
        if h < self.spec.stride or w < self.spec.stride:
            raise FeatureError(f"image {h}x{w} smaller than stride {self.spec.stride}")
        x = x - 0.5
        for i, (W, b) in enumerate(self.weights):
            c = x.shape[2]
            idx, ho, wo = _im2col_index(h, w)
            flat = ad.reshape(ad.pad2d(x, 1), ((h + 2) * (w + 2), c))
            cols = ad.reshape(ad.take(flat, idx), (ho * wo, 9 * c))
            act = "relu" if i < len(self.weights) - 1 else None
            y = ad.linear(cols, W, b, act)
            x = ad.reshape(y, (ho, wo, y.shape[1]))
            h, w = ho, wo
        c = x.shape[2]
        flat = ad.reshape(x, (h * w, c))
        norm = ad.sqrt(ad.sum(ad.square(flat), axis=1) + 1e-12)
        flat = flat / ad.broadcast_to(ad.reshape(norm, (h * w, 1)), (h * w, c))
        return ad.reshape(flat, (h, w, c))


@lru_cache(maxsize=8)
def builtin_extractor(spec: ExtractorSpec) -> RandomConvExtractor:
    return RandomConvExtractor(spec)


def write_feature_file(path, features: np.ndarray, frame_id: int, stride: int):
    f = np.asarray(features, dtype="<f4")
    if f.ndim != 3:
        raise FeatureError("features must be (h, w, c)")
    header = json.dumps({"h": f.shape[0], "w": f.shape[1], "c": f.shape[2], "stride": int(stride),
                         "frame_id": int(frame_id)}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(f).tobytes())


def read_feature_file(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + n])
    count = header["h"] * header["w"] * header["c"]
    data = np.frombuffer(raw[4 + n:], dtype="<f4")
    if data.size != count:
        raise FeatureError(f"{path}: expected {count} values, found {data.size}")
    return header, data.reshape(header["h"], header["w"], header["c"]).astype(np.float64)


def extract(image, spec: ExtractorSpec | None = None, frame_id: int | None = None) -> FeatureMap:
    """Feature map of ``image``; external specs load the file for ``frame_id`` instead."""
    spec = spec or ExtractorSpec()
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if spec.kind == "builtin_random_conv":
        out = builtin_extractor(spec)(image)
        h, w, c = out.shape
        return FeatureMap(h, w, c, out, spec.stride)
    if frame_id is None:
        raise FeatureError("external features need a frame id")
    path = Path(spec.directory) / f"{int(frame_id):06d}.feat"
    if not path.exists():
        raise FeatureError(f"frame {frame_id}: feature file {path} missing")
    header, data = read_feature_file(path)
    if header.get("frame_id") != int(frame_id):
        raise FeatureError(f"frame {frame_id}: feature file is labelled frame {header.get('frame_id')}")
    exp_h, exp_w = img.shape[0] // header["stride"], img.shape[1] // header["stride"]
    if (header["h"], header["w"]) != (exp_h, exp_w):
        raise FeatureError(f"frame {frame_id}: feature grid {header['h']}x{header['w']} does not match "
                           f"image {img.shape[0]}x{img.shape[1]} at stride {header['stride']}")
    return FeatureMap(header["h"], header["w"], header["c"], data, header["stride"])
