import numpy as np
import pytest
from gradcheck import check

from tuberf import autodiff as ad
from tuberf.autodiff import Parameter
from tuberf.features import (ExtractorSpec, FeatureError, FeatureMap, RandomConvExtractor, extract, read_feature_file,
                             write_feature_file)


def test_deterministic_and_unit_norm():
    img = np.random.default_rng(0).uniform(0, 1, (40, 48, 3))
    a, b = extract(img), extract(img)
    assert (a.height, a.width, a.channels, a.stride) == (5, 6, 64, 8)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert np.abs(np.linalg.norm(a.numpy(), axis=-1) - 1).max() < 1e-6
    fresh = RandomConvExtractor(ExtractorSpec())(img).data
    assert fresh.tobytes() == a.numpy().tobytes()


def test_spec_determines_extractor():
    img = np.random.default_rng(1).uniform(0, 1, (32, 32, 3))
    assert not np.allclose(extract(img, ExtractorSpec(seed=1)).numpy(), extract(img).numpy())
    fm = extract(img, ExtractorSpec(channels=16, stride=4))
    assert fm.numpy().shape == (8, 8, 16)


def test_constant_image_interior_features_identical():
    fm = extract(np.full((64, 64, 3), 0.37)).numpy()
    interior = fm[1:-1, 1:-1].reshape(-1, 64)
    assert np.abs(interior - interior[0]).max() < 1e-12


def test_translation_equivariance():
    img = np.random.default_rng(2).uniform(0, 1, (64, 64, 3))
    shifted = np.roll(img, 8, axis=1)
    a, b = extract(img).numpy(), extract(shifted).numpy()
    assert np.abs(b[2:6, 3:6] - a[2:6, 2:5]).max() < 1e-6


def test_gradient_flows_through_extractor():
    rng = np.random.default_rng(3)
    img = Parameter(rng.uniform(0, 1, (16, 16, 3)))
    ext = RandomConvExtractor(ExtractorSpec(channels=8, stride=4))
    w = rng.normal(size=(4, 4, 8))
    assert check(lambda: ad.sum(ext(img) * w), [img]) < 1e-4


def test_errors():
    with pytest.raises(FeatureError):
        extract(np.zeros((4, 4, 3)))
    with pytest.raises(FeatureError):
        extract(np.zeros((16, 16)))
    with pytest.raises(ValueError):
        ExtractorSpec(kind="vit")
    with pytest.raises(ValueError):
        ExtractorSpec(kind="external_precomputed")
    with pytest.raises(FeatureError):
        FeatureMap(1, 1, 2, np.array([[[np.nan, 0.0]]]), 8)


def test_external_features(tmp_path):
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(4, 5, 7)).astype(np.float32)
    write_feature_file(tmp_path / "000003.feat", feats, 3, 8)
    header, back = read_feature_file(tmp_path / "000003.feat")
    assert header == {"h": 4, "w": 5, "c": 7, "stride": 8, "frame_id": 3}
    assert np.array_equal(back, feats.astype(np.float64))
    spec = ExtractorSpec(kind="external_precomputed", directory=str(tmp_path))
    fm = extract(np.zeros((32, 40, 3)), spec, frame_id=3)
    assert fm.channels == 7 and fm.stride == 8
    with pytest.raises(FeatureError, match="frame 4"):
        extract(np.zeros((32, 40, 3)), spec, frame_id=4)
    with pytest.raises(FeatureError, match="frame 3"):
        extract(np.zeros((64, 40, 3)), spec, frame_id=3)
    write_feature_file(tmp_path / "000005.feat", feats, 6, 8)
    with pytest.raises(FeatureError, match="frame 5"):
        extract(np.zeros((32, 40, 3)), spec, frame_id=5)
