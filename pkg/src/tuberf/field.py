"""Multi-level radiance field: encoded-input MLP stages fused through residual logit sums."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass
class EncodingConfig:
    position_bands: int = 10
    direction_bands: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.position_bands < 0 or self.direction_bands < 0:
            raise ValueError("band counts must be non-negative")

    def length(self, bands: int) -> int:
        return 3 * (int(self.include_input) + 2 * bands)


def encode(x, bands: int, include_input: bool = True) -> np.ndarray:
    """Sinusoidal encoding ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]``.

    Higher octaves come from the double-angle recurrence, which is exact up
    to a few ulps per octave and far cheaper than calling ``sin`` per band.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    parts = [x] if include_input else []
    if bands > 0:
        s = np.sin(np.pi * x)
        c = np.cos(np.pi * x)
        for k in range(bands):
            if k:
                s, c = 2.0 * s * c, (c - s) * (c + s)
            parts.append(s)
            parts.append(c)
    out = np.concatenate(parts, axis=-1) if parts else np.zeros((len(x), 0))
    return out[0] if single else out


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, bias: float = 0.0):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.W = Parameter(rng.uniform(-limit, limit, size=(n_in, n_out)), name=f"{name}.W")
        self.b = Parameter(np.full(n_out, bias), name=f"{name}.b")

    def __call__(self, x: Tensor, activation: str | None = None) -> Tensor:
        return ad.linear(x, self.W, self.b, activation)

    def parameters(self) -> dict[str, Parameter]:
        return {self.W.name: self.W, self.b.name: self.b}


class RadianceStage:
    """One stage MLP emitting raw colour (3) and density (1) logits per point."""

    def __init__(self, pos_dim: int, dir_dim: int, depth: int, width: int, color_width: int,
                 rng: np.random.Generator, name: str, density_bias: float = 0.0):
        self.name = name
        self.trunk = []
        n = pos_dim
        for i in range(depth):
            self.trunk.append(Linear(n, width, rng, f"{name}.trunk{i}"))
            n = width
        self.density_head = Linear(width, 1, rng, f"{name}.density", bias=density_bias)
        self.color_hidden = Linear(width + dir_dim, color_width, rng, f"{name}.color0")
        self.color_head = Linear(color_width, 3, rng, f"{name}.color1")

    def layers(self) -> list[Linear]:
        return self.trunk + [self.density_head, self.color_hidden, self.color_head]

    def __call__(self, enc_x: Tensor, enc_d: Tensor) -> tuple[Tensor, Tensor]:
        """``enc_d`` may hold one row per ray; it is then shared by ``len(enc_x) // len(enc_d)`` points."""
        h = enc_x
        for layer in self.trunk:
            h = layer(h, "relu")
        n = h.shape[0]
        sigma = ad.reshape(self.density_head(h), (n,))
        # concat([h, d]) @ W == h @ W_h + d @ W_d, with the direction term computed per ray
        width = h.shape[1]
        W = self.color_hidden.W
        dir_term = ad.matmul(enc_d, W[width:])
        if enc_d.shape[0] != n:
            dir_term = ad.repeat_rows(dir_term, n // enc_d.shape[0])
        c = ad.relu(ad.linear(h, W[:width], self.color_hidden.b) + dir_term)
        return self.color_head(c), sigma

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for layer in self.layers():
            out.update(layer.parameters())
        return out


class VisibilityHead:
    """Predicts per-point transmittance in (0, 1) from encoded position and direction."""

    def __init__(self, in_dim: int, depth: int, width: int, rng: np.random.Generator, name: str = "visibility"):
        self.layers = []
        n = in_dim
        for i in range(depth):
            self.layers.append(Linear(n, width, rng, f"{name}.hidden{i}"))
            n = width
        self.out = Linear(n, 1, rng, f"{name}.out")

    def __call__(self, enc: Tensor) -> Tensor:
        h = enc
        for layer in self.layers:
            h = layer(h, "relu")
        return ad.sigmoid(ad.reshape(self.out(h), (h.shape[0],)))

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for layer in self.layers + [self.out]:
            out.update(layer.parameters())
        return out


@dataclass
class FieldConfig:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    trunk_depth: int = 4
    trunk_width: int = 128
    color_width: int = 64
    visibility_depth: int = 2
    visibility_width: int = 64
    # "bounded": sigmoid density, softplus colour clamped to [0, 1]; "conventional": the usual assignment
    activation: str = "bounded"
    # converts the (0, 1) normalized density to optical density per world unit
    density_scale: float = 50.0
    density_bias: float = -4.0
    freeze_previous: bool = False
    scene_center: tuple = (0.0, 0.0, 0.0)
    scene_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            self.encoding = EncodingConfig(**self.encoding)
        if self.activation not in ("bounded", "conventional"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.scene_center = tuple(float(v) for v in self.scene_center)

    def to_dict(self) -> dict:
        return asdict(self)


class MultiLevelField:
    """Coarse-to-fine stack of :class:`RadianceStage` sharing one visibility head.

    Querying with ``k`` active stages sums the first ``k`` stages' logits and
    applies the output activations once to the sums.
    """

    def __init__(self, config: FieldConfig | None = None, n_stages: int = 1):
        self.config = config or FieldConfig()
        enc = self.config.encoding
        self.pos_dim = enc.length(enc.position_bands)
        self.dir_dim = enc.length(enc.direction_bands)
        self._rng = np.random.default_rng(self.config.seed)
        self.stages: list[RadianceStage] = [self._new_stage(0)]
        self.visibility_head = VisibilityHead(self.pos_dim + self.dir_dim, self.config.visibility_depth,
                                              self.config.visibility_width, self._rng)
        for _ in range(n_stages - 1):
            self.add_stage()

    def _new_stage(self, index: int) -> RadianceStage:
        c = self.config
        return RadianceStage(self.pos_dim, self.dir_dim, c.trunk_depth, c.trunk_width, c.color_width,
                             self._rng, f"stage{index}", density_bias=c.density_bias)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def add_stage(self) -> MultiLevelField:
        """Append a stage initialized as a copy of the current last stage."""
        new = self._new_stage(len(self.stages))
        for dst, src in zip(new.layers(), self.stages[-1].layers()):
            dst.W.data[...] = src.W.data
            dst.b.data[...] = src.b.data
        self.stages.append(new)
        return self

    # -------------------------------------------------------------- params
    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for s in self.stages:
            out.update(s.parameters())
        out.update(self.visibility_head.parameters())
        return out

    def trainable_parameters(self) -> dict[str, Parameter]:
        if not self.config.freeze_previous:
            return self.parameters()
        out = dict(self.stages[-1].parameters())
        out.update(self.visibility_head.parameters())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data[...] = arrays[k]

    # -------------------------------------------------------------- queries
    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.config.scene_center)) / self.config.scene_scale

    def encode_inputs(self, x, d) -> tuple[np.ndarray, np.ndarray]:
        enc = self.config.encoding
        ex = encode(self.normalize(x), enc.position_bands, enc.include_input)
        ed = encode(np.asarray(d, dtype=np.float64), enc.direction_bands, enc.include_input)
        return ex, ed

    def logits(self, x, d, active_stages: int | None = None) -> tuple[Tensor, Tensor]:
        """Summed colour (N, 3) and density (N,) logits of the first ``active_stages`` stages."""
        k = self.n_stages if active_stages is None else active_stages
        if not 1 <= k <= self.n_stages:
            raise ValueError(f"active_stages must be in [1, {self.n_stages}], got {k}")
        x, d = np.atleast_2d(x), np.atleast_2d(d)
        if len(x) % len(d):
            raise ValueError(f"{len(x)} points cannot share {len(d)} directions")
        ex, ed = self.encode_inputs(x, d)
        ex, ed = Tensor(ex), Tensor(ed)
        c_sum = s_sum = None
        for stage in self.stages[:k]:
            c, s = stage(ex, ed)
            c_sum = c if c_sum is None else c_sum + c
            s_sum = s if s_sum is None else s_sum + s
        return c_sum, s_sum

    def activate(self, c_logit: Tensor, s_logit: Tensor) -> tuple[Tensor, Tensor]:
        if self.config.activation == "bounded":
            return ad.clip(ad.softplus(c_logit), 0.0, 1.0), ad.sigmoid(s_logit)
        return ad.sigmoid(c_logit), ad.softplus(s_logit)

    def query(self, x, d, active_stages: int | None = None) -> tuple[Tensor, Tensor]:
        """Colour in [0, 1]^3 and normalized density per point."""
        return self.activate(*self.logits(x, d, active_stages))

    def radiance(self, x, d, active_stages: int | None = None) -> tuple[Tensor, Tensor]:
        """Colour and optical density (per world unit) as consumed by the renderer."""
        color, density = self.query(x, d, active_stages)
        return color, density * self.config.density_scale

    def visibility(self, x, d) -> Tensor:
        x, d = np.atleast_2d(x), np.atleast_2d(d)
        ex, ed = self.encode_inputs(x, d)
        if len(ed) != len(ex):
            ed = np.repeat(ed, len(ex) // len(ed), axis=0)
        return self.visibility_head(Tensor(np.concatenate([ex, ed], axis=-1)))


@dataclass
class StageSchedule:
    total_frames: int
    stage_count: int = 3

    def __post_init__(self):
        if self.stage_count < 1:
            raise ValueError("stage_count must be >= 1")

    def stride(self, stage: int) -> int:
        return 2 ** (self.stage_count - stage)


def schedule_frames(schedule: StageSchedule, stage: int) -> list[int]:
    """Indices (into the block's training frames) used at 1-based ``stage``."""
    if not 1 <= stage <= schedule.stage_count:
        raise ValueError(f"stage must be in [1, {schedule.stage_count}], got {stage}")
    return list(range(0, schedule.total_frames, schedule.stride(stage)))


def field_from_arrays(config: FieldConfig, n_stages: int, arrays: dict[str, np.ndarray]) -> MultiLevelField:
    f = MultiLevelField(config, n_stages=n_stages)
    f.load_state_arrays(arrays)
    return f


def cosine_similarity(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    va = np.concatenate([np.ravel(x) for x in a])
    vb = np.concatenate([np.ravel(x) for x in b])
    return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
