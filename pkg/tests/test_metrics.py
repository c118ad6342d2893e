import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tuberf.metrics import EvalReport, config_hash, depth_mse, ms_ssim, psnr, ssim, usable_scales


def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == 120.0
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    assert abs(psnr(a, a + 0.01) - 40.0) < 1e-9
    with pytest.raises(ValueError):
        psnr(a, np.zeros((8, 7, 3)))


@given(st.integers(0, 1000))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (2, 6, 6, 3))
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identity_and_constant_offset():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (64, 64, 3))
    assert abs(ssim(img, img) - 1) < 1e-12
    assert abs(ms_ssim(img, img) - 1) < 1e-12
    assert ssim(img, np.clip(img + 0.2, 0, 1)) < 1
    with pytest.raises(ValueError):
        ssim(img[:8, :8], img[:8, :8])


def test_ssim_matches_reference_implementation():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (48, 40))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0)
    # the reference crops a 5 px border of the same valid filter response
    assert abs(ssim(a, b) - ref) < 2e-3


def test_ms_ssim_monotone_under_noise():
    rng = np.random.default_rng(2)
    yy, xx = np.mgrid[0:176, 0:176] / 176.0
    img = np.stack([0.5 + 0.4 * np.sin(6 * xx + 3 * yy), 0.5 + 0.3 * np.cos(5 * yy), xx * yy], -1)
    vals = []
    for s in (0.0, 0.02, 0.05, 0.1, 0.2):
        noisy = np.clip(img + rng.normal(0, s, img.shape), 0, 1)
        v, info = ms_ssim(img, noisy, return_info=True)
        assert info["scales"] == 5 and info["warning"] is None
        vals.append(v)
    assert vals[0] == pytest.approx(1.0)
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ms_ssim_small_image_renormalizes():
    assert usable_scales((176, 176)) == 5
    assert usable_scales((96, 96)) == 4
    assert usable_scales((11, 30)) == 1
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (64, 64))
    v, info = ms_ssim(a, a * 0.9, return_info=True)
    assert info["scales"] == 3 and "renormalized" in info["warning"]
    assert 0 < v < 1


def test_depth_mse():
    a = np.array([[1.0, 2.0], [3.0, 0.0]])
    b = np.array([[1.5, 2.0], [3.0, 9.0]])
    assert depth_mse(a, b, np.array([[True, True], [True, False]])) == pytest.approx(0.25 / 3)
    with pytest.raises(ValueError):
        depth_mse(a, b, np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        depth_mse(a, b, np.ones((3, 2), bool))


def test_eval_report(tmp_path):
    rng = np.random.default_rng(4)
    rep = EvalReport(config_hash=config_hash({"a": 1}))
    for i in range(3):
        gt = rng.uniform(0, 1, (32, 32, 3))
        d = rng.uniform(1, 2, (32, 32))
        rep.add(i, np.clip(gt + 0.05, 0, 1), gt, d + 0.1, d)
    assert rep.frame_count == 3
    assert rep.mean("depth_mse") == pytest.approx(0.01)
    assert rep.warnings and "renormalized" in rep.warnings[0]
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["frame_count"] == 3 and data["frames"][0]["lpips_vgg"] is None
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("frame,psnr") and lines[-1].startswith("mean") and len(lines) == 5
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1}) != config_hash({"a": 2})
