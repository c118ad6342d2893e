import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tuberf import TrajectoryDivider, TubeReconstructor
from tuberf.dataset import generate_phantom, preset_config
from tuberf.estimator import check_frames, check_trajectory
from tuberf.field import EncodingConfig, FieldConfig
from tuberf.geometry import Pose, Quaternion
from tuberf.renderer import RenderConfig
from tuberf.trainer import TrainConfig


@pytest.fixture(scope="module")
def tube():
    return generate_phantom(preset_config("straight-tube", frames=10, width=16, height=16))


def tiny():
    return TrainConfig(iterations_per_stage=2, stage_count=2, patches=1, patch_size=4, random_rays=8, helix_rays=4,
                       spin_rays=4, vit_patch=8, trans_rays=2, spin_angles=(20.0, 10.0, 5.0),
                       field=FieldConfig(encoding=EncodingConfig(2, 1), trunk_depth=1, trunk_width=8, color_width=4,
                                         visibility_depth=1, visibility_width=8),
                       render=RenderConfig(samples_per_ray=8))


def l_poses(n=60):
    poses = []
    for i in range(n):
        if i < n // 2:
            poses.append(Pose(Quaternion.identity(), (0, 0, 0.2 * i)))
        else:
            q = Quaternion.from_axis_angle([0, 1, 0], np.pi / 2)
            poses.append(Pose(q, (0.2 * (i - n // 2), 0, 0.2 * (n // 2))))
    return poses


def test_divider_params_and_clone():
    d = TrajectoryDivider(angle_threshold_deg=30, min_block=10)
    assert d.get_params()["angle_threshold_deg"] == 30
    assert clone(d).get_params() == d.get_params()
    with pytest.raises(NotFittedError):
        d.transform(l_poses())


def test_divider_fit_transform_on_l_shape():
    labels = TrajectoryDivider(min_block=10).fit_transform(l_poses())
    assert labels.shape == (60,) and set(labels.tolist()) == {0, 1}
    assert np.all(np.diff(labels) >= 0)
    assert abs(int(np.argmax(labels == 1)) - 30) <= 5


def test_divider_rejects_length_mismatch():
    d = TrajectoryDivider(min_block=10).fit(l_poses())
    with pytest.raises(ValueError):
        d.transform(l_poses(40))


def test_validation_helpers(tube):
    assert len(check_frames(tube)) == 10
    assert len(check_trajectory(tube.frames)) == 10
    with pytest.raises(ValueError):
        check_frames([])
    with pytest.raises(ValueError):
        check_frames(tube.frames[::-1])
    with pytest.raises(TypeError):
        check_frames([1, 2])
    with pytest.raises(TypeError):
        check_trajectory([1, 2])


def test_reconstructor_fit_predict_score(tube, tmp_path):
    est = TubeReconstructor(config=tiny(), views=2, min_block=20, eval_samples=8, work_dir=str(tmp_path))
    assert clone(est).get_params()["views"] == 2
    with pytest.raises(NotFittedError):
        est.predict([tube.frames[0].pose])
    est.fit(tube)
    assert est.n_blocks_ == 1 and est.manifest_["errors"] == {}
    rgb = est.predict(tube.frames[:2])
    depth = est.predict_depth([tube.frames[0].pose])
    assert rgb.shape == (2, 16, 16, 3) and np.all((rgb >= 0) & (rgb <= 1))
    assert depth.shape == (1, 16, 16)
    s = est.score(tube.frames[::3])
    assert np.isfinite(s) and s > 0
    with pytest.raises(ValueError):
        TubeReconstructor(config=tiny()).fit(tube.frames)
