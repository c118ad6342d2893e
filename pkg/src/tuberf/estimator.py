"""scikit-learn style wrappers around trajectory division and piecewise training."""
from __future__ import annotations

import copy
import tempfile

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset, Frame
from .geometry import Pose
from .segmentation import Trajectory, divide_detailed


def check_frames(X) -> list:
    """Accept a Dataset or a sequence of Frames; validate ids, shapes and depth."""
    frames = list(X.frames) if isinstance(X, Dataset) else list(X)
    if not frames:
        raise ValueError("no frames given")
    for f in frames:
        if not isinstance(f, Frame):
            raise TypeError(f"expected Frame objects, got {type(f).__name__}")
        if f.rgb.ndim != 3 or f.rgb.shape[2] != 3 or f.depth.shape != f.rgb.shape[:2]:
            raise ValueError(f"frame {f.id}: inconsistent image shapes {f.rgb.shape} / {f.depth.shape}")
        if not np.all(np.isfinite(f.rgb)) or not np.all(np.isfinite(f.depth)):
            raise ValueError(f"frame {f.id}: non-finite pixel values")
    ids = [f.id for f in frames]
    if ids != sorted(set(ids)):
        raise ValueError("frame ids must be unique and in trajectory order")
    return frames


def check_trajectory(X) -> Trajectory:
    if isinstance(X, Trajectory):
        return X
    if isinstance(X, Dataset) or (len(X) and isinstance(X[0], Frame)):
        return Trajectory.from_frames(check_frames(X))
    poses = list(X)
    if not all(isinstance(p, Pose) for p in poses):
        raise TypeError("expected a Trajectory, frames or a sequence of Pose")
    return Trajectory(list(range(len(poses))), poses)


class TrajectoryDivider(TransformerMixin, BaseEstimator):
    """Fit finds overlapping blocks; transform maps each frame to its core block index."""

    def __init__(self, angle_threshold_deg: float = 25.0, min_block: int = 20, overlap: float = 0.30,
                 smoothing: int = 5):
        self.angle_threshold_deg = angle_threshold_deg
        self.min_block = min_block
        self.overlap = overlap
        self.smoothing = smoothing

    def fit(self, X, y=None):
        traj = check_trajectory(X)
        self.division_ = divide_detailed(traj, self.angle_threshold_deg, self.min_block, self.overlap,
                                         self.smoothing)
        self.blocks_ = self.division_.blocks
        self.n_frames_ = len(traj)
        return self

    def transform(self, X):
        check_is_fitted(self, "blocks_")
        traj = check_trajectory(X)
        if len(traj) != self.n_frames_:
            raise ValueError(f"fitted on {self.n_frames_} frames, got {len(traj)}")
        out = np.empty(len(traj), dtype=np.int64)
        for b in self.blocks_:
            out[b.core_start:b.core_end] = b.index
        return out


class TubeReconstructor(BaseEstimator):
    """Piecewise radiance-field reconstruction.

    ``fit`` takes the training frames (Dataset or list of Frame), divides the
    trajectory and trains one multi-stage field per block. ``predict`` renders
    RGB images for a sequence of poses; ``score`` returns the mean PSNR on
    held-out frames.
    """

    def __init__(self, config=None, views: int = 3, angle_threshold_deg: float = 25.0, min_block: int = 20,
                 overlap: float = 0.30, epsilon: float = 2.0, eval_samples: int | None = None, seed: int = 0,
                 work_dir=None):
        self.config = config
        self.views = views
        self.angle_threshold_deg = angle_threshold_deg
        self.min_block = min_block
        self.overlap = overlap
        self.epsilon = epsilon
        self.eval_samples = eval_samples
        self.seed = seed
        self.work_dir = work_dir

    def _train_config(self):
        from .trainer import desk_config

        cfg = copy.deepcopy(self.config) if self.config is not None else desk_config()
        cfg.views = self.views
        cfg.seed = self.seed
        return cfg

    def fit(self, X, y=None, intrinsics=None, near: float | None = None, far: float | None = None):
        from .trainer import load_model, train_all

        frames = check_frames(X)
        if isinstance(X, Dataset):
            intrinsics, near, far = X.intrinsics, X.near, X.far
        if intrinsics is None or near is None or far is None:
            raise ValueError("intrinsics, near and far are required when fitting on a list of frames")
        ds = Dataset(frames, intrinsics, near, far)
        out = self.work_dir or tempfile.mkdtemp(prefix="tuberf-")
        self.manifest_ = train_all(ds, frames, self._train_config(), out, self.angle_threshold_deg,
                                   self.min_block, self.overlap)
        self.model_ = load_model(out)
        self.model_dir_ = out
        self.n_blocks_ = len(self.model_.fields)
        return self

    def _integration(self):
        from .integration import IntegrationConfig

        return IntegrationConfig(epsilon=self.epsilon)

    def render(self, pose: Pose):
        check_is_fitted(self, "model_")
        rgb, depth, _ = self.model_.render(pose, self.eval_samples, self._integration())
        return np.clip(rgb, 0.0, 1.0), depth

    def predict(self, X) -> np.ndarray:
        """(n, H, W, 3) RGB renders for poses (or the poses of frames)."""
        poses = [x.pose if isinstance(x, Frame) else x for x in (X.frames if isinstance(X, Dataset) else X)]
        return np.stack([self.render(p)[0] for p in poses])

    def predict_depth(self, X) -> np.ndarray:
        poses = [x.pose if isinstance(x, Frame) else x for x in (X.frames if isinstance(X, Dataset) else X)]
        return np.stack([self.render(p)[1] for p in poses])

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return self.model_.evaluate(check_frames(X), self.eval_samples, self._integration())

    def score(self, X, y=None) -> float:
        return float(self.evaluate(X).mean("psnr"))
