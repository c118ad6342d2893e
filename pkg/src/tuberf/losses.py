"""Training objectives and their weighted combination.

All losses take autodiff tensors for rendered quantities and plain arrays for
targets. Masked losses gather the valid entries before reducing, so values at
invalid pixels (sentinels, NaN) never reach the result or its gradient.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import ExtractorSpec, FeatureMap, builtin_extractor

# counts degenerate batches (e.g. a depth loss with nothing valid to supervise)
DEGENERATE = Counter()

COMPONENTS = ("depth", "ori", "vit", "trans")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, value):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


@dataclass
class LossWeights:
    depth: float = 8.0
    ori: float = 1.0
    vit: float = 10.0
    trans: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")

    def as_dict(self) -> dict:
        return asdict(self)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def pixel_loss(pred, target) -> Tensor:
    """Mean over rays of the squared L2 colour error."""
    pred = _t(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pixel_loss: {pred.shape} predictions vs {target.shape} targets")
    n = pred.shape[0]
    return ad.sum(ad.square(pred - target)) * (1.0 / n)


def depth_mse(pred, target) -> Tensor:
    pred = _t(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"depth_mse: {pred.shape} vs {target.shape}")
    return ad.mean(ad.square(pred - target))


def ori_terms(patch_rgb, patch_gt_rgb, patch_depth, patch_gt_depth,
              rand_rgb, rand_gt_rgb, rand_depth, rand_gt_depth) -> tuple[Tensor, Tensor]:
    """(L_patch, L_rand): each is RGB pixel loss plus depth MSE on its own sample set."""
    l_patch = pixel_loss(patch_rgb, patch_gt_rgb) + depth_mse(patch_depth, patch_gt_depth)
    l_rand = pixel_loss(rand_rgb, rand_gt_rgb) + depth_mse(rand_depth, rand_gt_depth)
    return l_patch, l_rand


def ori_loss(*args) -> Tensor:
    """Original-view loss ``L_patch + L_rand`` (see :func:`ori_terms` for the arguments)."""
    l_patch, l_rand = ori_terms(*args)
    return l_patch + l_rand


def masked_smooth_l1(pred, target, mask, beta: float = 1.0) -> Tensor | None:
    """Mean smooth-L1 over valid entries, or None when nothing is valid."""
    pred = _t(pred)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.size != mask.size or target.size != mask.size:
        raise ValueError("masked_smooth_l1: prediction, target and mask sizes differ")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return None
    p = ad.take(ad.reshape(pred, (pred.size,)), idx)
    return ad.mean(ad.smooth_l1(p - target[idx], beta))


def depth_loss(rendered_depth, helix_depth=None, helix_mask=None, spin_depth=None, spin_mask=None,
               beta: float = 1.0, rendered_spin=None) -> Tensor:
    """Sum of masked smooth-L1 means against helix and spin pseudo-depths.

    ``rendered_depth`` is compared with the helix targets and ``rendered_spin``
    (defaulting to ``rendered_depth``) with the spin targets. Families whose
    targets are None or fully masked contribute nothing; if both are empty the
    result is 0 and ``DEGENERATE["depth_loss"]`` is incremented.
    """
    terms = []
    if helix_depth is not None:
        t = masked_smooth_l1(rendered_depth, helix_depth,
                             np.ones(np.shape(helix_depth), bool) if helix_mask is None else helix_mask, beta)
        if t is not None:
            terms.append(t)
    if spin_depth is not None:
        src = rendered_depth if rendered_spin is None else rendered_spin
        t = masked_smooth_l1(src, spin_depth,
                             np.ones(np.shape(spin_depth), bool) if spin_mask is None else spin_mask, beta)
        if t is not None:
            terms.append(t)
    if not terms:
        DEGENERATE["depth_loss"] += 1
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def feature_mse(a, b) -> Tensor:
    a = a.data if isinstance(a, FeatureMap) else a
    b = b.data if isinstance(b, FeatureMap) else b
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"feature maps differ in shape: {a.shape} vs {b.shape}")
    return ad.mean(ad.square(a - b))


def vit_loss(extractor, original, rendered, mask=None) -> Tensor:
    """Mean squared difference between features of ``original`` (detached) and ``rendered``.

    ``extractor`` is a callable on (H, W, 3) images or an :class:`ExtractorSpec`.
    ``original`` may be an image or a precomputed :class:`FeatureMap`. With a
    ``mask``, invalid pixels of both images are replaced by zero before
    extraction so holes in a warped target do not count as content.
    """
    if isinstance(extractor, ExtractorSpec):
        extractor = builtin_extractor(extractor)
    rendered = _t(rendered)
    if mask is not None:
        m = np.asarray(mask, dtype=float)[..., None]
        rendered = rendered * np.broadcast_to(m, rendered.shape)
    if isinstance(original, FeatureMap):
        target = original.numpy()
    else:
        orig = np.asarray(original.data if isinstance(original, Tensor) else original, dtype=np.float64)
        if orig.shape != rendered.shape:
            raise ValueError(f"vit_loss: images differ in shape: {orig.shape} vs {rendered.shape}")
        if mask is not None:
            orig = orig * m
        target = extractor(orig).data
    return feature_mse(Tensor(target), extractor(rendered))


def trans_loss(visibility, targets) -> Tensor:
    """Mean absolute difference between visibility predictions and detached targets."""
    visibility = _t(visibility)
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if visibility.size != targets.size:
        raise ValueError(f"trans_loss: {visibility.size} predictions vs {targets.size} targets")
    return ad.mean(ad.abs(ad.reshape(visibility, targets.shape) - targets))


def transmittance_targets(batch, kind: str = "transmittance") -> np.ndarray:
    """Detached per-sample targets for the visibility head from a render batch."""
    if kind == "transmittance":
        return batch.transmittance.data.copy()
    if kind == "alpha":
        return 1.0 - np.exp(-batch.sigma.data * batch.deltas)
    raise ValueError(f"unknown trans_target {kind!r}")


def total_loss(components: dict, weights: LossWeights | None = None) -> Tensor:
    """Weighted sum ``w.depth*L_depth + w.ori*L_ori + w.vit*L_vit + w.trans*L_trans``.

    Missing components count as zero; any non-finite component raises
    :class:`NonFiniteLoss` naming it.
    """
    weights = weights or LossWeights()
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    out = Tensor(0.0)
    for name in COMPONENTS:
        if name not in components:
            continue
        c = _t(components[name])
        v = float(np.sum(c.data))
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
        out = out + c * getattr(weights, name)
    return out
