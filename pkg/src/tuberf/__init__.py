"""Piecewise neural radiance fields for tubular scenes, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .dataset import Dataset, Frame, SplitSpec, TubePhantom, TubePhantomConfig, generate_phantom, load_dataset, split
from .estimator import TrajectoryDivider, TubeReconstructor
from .field import FieldConfig, MultiLevelField
from .geometry import CameraIntrinsics, Pose, Quaternion
from .renderer import RenderConfig, render_image, render_rays
from .trainer import TrainConfig, Trainer, desk_config, train_all, train_block

__all__ = [
    "CameraIntrinsics", "Dataset", "FieldConfig", "Frame", "MultiLevelField", "Pose", "Quaternion", "RenderConfig",
    "SplitSpec", "TrainConfig", "Trainer", "TrajectoryDivider", "TubePhantom", "TubePhantomConfig",
    "TubeReconstructor", "desk_config", "generate_phantom", "load_dataset", "render_image", "render_rays", "split",
    "train_all", "train_block",
]
