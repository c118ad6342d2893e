"""Split a camera trajectory into overlapping blocks at bends.

The heading is each pose's forward axis, boxcar-smoothed over a few frames.
Walking along the trajectory, the heading's turn angle accumulates; once it
exceeds the threshold a cut candidate is placed and the accumulator resets.
Candidates closer together than ``min_block`` frames describe one bend and
collapse to their median. Cores (the frames a block owns) partition the
trajectory; each pair of neighbours then shares ``round(overlap * shorter core)``
frames, split evenly around the cut.

All ranges are half-open ``[start, end)`` positions along the trajectory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose


@dataclass
class Trajectory:
    ids: list
    poses: list

    def __post_init__(self):
        if len(self.ids) != len(self.poses):
            raise ValueError("ids and poses differ in length")
        if len(self.ids) < 2:
            raise ValueError("a trajectory needs at least two frames")
        ids = [int(i) for i in self.ids]
        if len(set(ids)) != len(ids) or ids != sorted(ids):
            raise ValueError("trajectory ids must be unique and sorted")
        self.ids = ids

    @classmethod
    def from_frames(cls, frames) -> Trajectory:
        return cls([f.id for f in frames], [f.pose for f in frames])

    def __len__(self):
        return len(self.ids)

    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    def forward(self) -> np.ndarray:
        return np.stack([p.forward for p in self.poses])


@dataclass
class Block:
    index: int
    start: int
    end: int
    core_start: int
    core_end: int
    center: np.ndarray
    frame_ids: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def core_length(self) -> int:
        return self.core_end - self.core_start

    @property
    def leading_margin(self) -> tuple[int, int]:
        return (self.start, self.core_start)

    @property
    def trailing_margin(self) -> tuple[int, int]:
        return (self.core_end, self.end)

    def positions(self) -> range:
        return range(self.start, self.end)

    def to_dict(self) -> dict:
        return {"index": self.index, "range": [self.start, self.end], "core": [self.core_start, self.core_end],
                "leading_margin": list(self.leading_margin), "trailing_margin": list(self.trailing_margin),
                "center": [float(v) for v in self.center], "frame_ids": [int(i) for i in self.frame_ids]}

    @classmethod
    def from_dict(cls, d: dict) -> Block:
        return cls(d["index"], d["range"][0], d["range"][1], d["core"][0], d["core"][1],
                   np.asarray(d["center"], dtype=float), list(d.get("frame_ids", [])))


def smoothed_heading(traj: Trajectory, width: int = 5) -> np.ndarray:
    f = traj.forward()
    half = width // 2
    out = np.empty_like(f)
    for i in range(len(f)):
        lo, hi = max(0, i - half), min(len(f), i + half + 1)
        v = f[lo:hi].sum(axis=0)
        out[i] = v / np.linalg.norm(v)
    return out


def turn_profile(traj: Trajectory, width: int = 5) -> np.ndarray:
    """Per-frame turn angle (degrees) of the smoothed heading relative to the previous frame."""
    h = smoothed_heading(traj, width)
    cosang = np.clip(np.einsum("ij,ij->i", h[1:], h[:-1]), -1.0, 1.0)
    return np.concatenate([[0.0], np.degrees(np.arccos(cosang))])


def cut_candidates(turns: np.ndarray, threshold: float) -> tuple[list[int], np.ndarray]:
    acc = 0.0
    cuts = []
    cumulative = np.empty_like(turns)
    for i, a in enumerate(turns):
        acc += a
        cumulative[i] = acc
        if acc > threshold:
            cuts.append(i)
            acc = 0.0
    return cuts, cumulative


def _cluster(cuts: list[int], gap: int) -> list[int]:
    if not cuts:
        return []
    groups = [[cuts[0]]]
    for c in cuts[1:]:
        if c - groups[-1][-1] < gap:
            groups[-1].append(c)
        else:
            groups.append([c])
    return [int(np.floor(np.median(g) + 0.5)) for g in groups]


def _merge_short(bounds: list[int], min_block: int) -> list[int]:
    """Drop interior boundaries until every core is at least ``min_block`` long."""
    bounds = list(bounds)
    while len(bounds) > 2:
        lengths = np.diff(bounds)
        i = int(np.argmin(lengths))
        if lengths[i] >= min_block:
            break
        # remove the boundary shared with the shorter neighbour
        if i == 0:
            del bounds[1]
        elif i == len(lengths) - 1:
            del bounds[-2]
        elif lengths[i - 1] <= lengths[i + 1]:
            del bounds[i]
        else:
            del bounds[i + 1]
    return bounds


def block_center(block: Block, traj: Trajectory) -> np.ndarray:
    """Mean camera position over the block's core frames."""
    if block.core_length <= 0:
        raise ValueError("block core is empty")
    return traj.positions()[block.core_start:block.core_end].mean(axis=0)


@dataclass
class Division:
    blocks: list
    cuts: list
    candidates: list
    turns: np.ndarray
    cumulative: np.ndarray
    params: dict

    def manifest(self) -> dict:
        return {"params": self.params, "blocks": [b.to_dict() for b in self.blocks], "cuts": self.cuts,
                "diagnostics": {"candidates": self.candidates,
                                "turn_deg": [round(float(v), 9) for v in self.turns],
                                "cumulative_turn_deg": [round(float(v), 9) for v in self.cumulative]}}

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def divide_detailed(traj: Trajectory, angle_threshold_deg: float = 25.0, min_block: int = 20,
                    overlap: float = 0.30, smoothing: int = 5) -> Division:
    n = len(traj)
    params = {"angle_threshold_deg": angle_threshold_deg, "min_block": min_block, "overlap": overlap,
              "smoothing": smoothing}
    turns = turn_profile(traj, smoothing)
    candidates, cumulative = cut_candidates(turns, angle_threshold_deg)
    if n < min_block:
        bounds = [0, n]
    else:
        bounds = _merge_short([0] + [c for c in _cluster(candidates, min_block) if 0 < c < n] + [n], min_block)
    cores = list(zip(bounds[:-1], bounds[1:]))
    lead = [0] * len(cores)
    trail = [0] * len(cores)
    for i in range(len(cores) - 1):
        o = int(round(overlap * min(cores[i][1] - cores[i][0], cores[i + 1][1] - cores[i + 1][0])))
        trail[i] = o // 2
        lead[i + 1] = o - o // 2
    blocks = []
    for i, (cs, ce) in enumerate(cores):
        start, end = max(0, cs - lead[i]), min(n, ce + trail[i])
        b = Block(i, start, end, cs, ce, np.zeros(3), traj.ids[start:end])
        b.center = block_center(b, traj)
        blocks.append(b)
    return Division(blocks, bounds[1:-1], candidates, turns, cumulative, params)


def divide(traj: Trajectory, angle_threshold_deg: float = 25.0, min_block: int = 20, overlap: float = 0.30,
           smoothing: int = 5) -> list[Block]:
    return divide_detailed(traj, angle_threshold_deg, min_block, overlap, smoothing).blocks


def overlap_frames(a: Block, b: Block) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def load_manifest(path) -> list[Block]:
    doc = json.loads(Path(path).read_text())
    return [Block.from_dict(b) for b in doc["blocks"]]


def rigidly_transform(traj: Trajectory, transform: Pose) -> Trajectory:
    from .geometry import compose

    return Trajectory(list(traj.ids), [compose(transform, p) for p in traj.poses])
