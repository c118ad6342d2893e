import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tuberf import autodiff as ad
from tuberf.autodiff import Adam, Tape
from tuberf.field import (EncodingConfig, FieldConfig, MultiLevelField, StageSchedule, cosine_similarity, encode,
                          field_from_arrays, schedule_frames)
from tuberf.losses import trans_loss
from tuberf.renderer import RenderConfig, render_rays

SMALL = FieldConfig(encoding=EncodingConfig(position_bands=4, direction_bands=2), trunk_depth=2, trunk_width=16,
                    color_width=8, visibility_depth=2, visibility_width=16)


def small_field(n_stages=1, **kw):
    cfg = FieldConfig(**{**SMALL.__dict__, **kw})
    return MultiLevelField(cfg, n_stages)


def test_encode_examples():
    e = encode(np.zeros(3), 4)
    assert e.shape == (3 * 9,)
    assert np.all(e[:3] == 0)
    sins = e[3:].reshape(4, 2, 3)[:, 0]
    coss = e[3:].reshape(4, 2, 3)[:, 1]
    assert np.all(sins == 0) and np.all(coss == 1)
    assert encode(np.ones(3), 10).shape == (63,)
    assert EncodingConfig().length(10) == 63
    assert encode(np.ones(3), 3, include_input=False).shape == (18,)


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.integers(0, 10))
def test_encode_matches_direct_formula(x, L):
    x = np.array(x)
    ref = [x]
    for k in range(L):
        ref += [np.sin(2.0**k * np.pi * x), np.cos(2.0**k * np.pi * x)]
    assert np.allclose(encode(x, L), np.concatenate(ref), atol=1e-9)
    assert np.array_equal(encode(x, L), encode(x, L))


def test_zero_logits_give_half_density_and_ln2_colour():
    f = small_field(2)
    for p in f.parameters().values():
        p.data[...] = 0.0
    x = np.random.default_rng(0).normal(size=(5, 3))
    c, s = f.query(x, np.tile([0, 0, 1.0], (5, 1)))
    assert np.allclose(s.data, 0.5)
    assert np.allclose(c.data, np.log(2))
    assert np.allclose(f.visibility(x, np.tile([0, 0, 1.0], (5, 1))).data, 0.5)


def test_single_stage_and_duplicated_stage_fusion():
    f = small_field(1)
    rng = np.random.default_rng(1)
    x, d = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    c1, s1 = f.logits(x, d, 1)
    col, den = f.query(x, d, 1)
    assert np.allclose(den.data, 1 / (1 + np.exp(-s1.data)))
    assert np.allclose(col.data, np.clip(np.log1p(np.exp(c1.data)), 0, 1))
    f.add_stage()
    assert f.n_stages == 2
    c2, s2 = f.stages[1](*(ad.Tensor(v) for v in f.encode_inputs(x, d)))
    assert np.array_equal(c2.data, c1.data) and np.array_equal(s2.data, s1.data)
    col2, den2 = f.query(x, d, 2)
    assert np.allclose(den2.data, 1 / (1 + np.exp(-2 * s1.data)))
    assert np.allclose(col2.data, np.clip(np.log1p(np.exp(2 * c1.data)), 0, 1))
    a = [p.data for p in f.stages[0].parameters().values()]
    b = [p.data for p in f.stages[1].parameters().values()]
    assert abs(cosine_similarity(a, b) - 1.0) < 1e-12


def test_conventional_activation_switch():
    f = small_field(1, activation="conventional")
    rng = np.random.default_rng(2)
    x, d = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    c, s = f.logits(x, d)
    col, den = f.query(x, d)
    assert np.allclose(col.data, 1 / (1 + np.exp(-c.data)))
    assert np.allclose(den.data, np.log1p(np.exp(s.data)))
    with pytest.raises(ValueError):
        FieldConfig(activation="other")


def test_active_stage_range():
    f = small_field(2)
    with pytest.raises(ValueError):
        f.query(np.zeros((1, 3)), np.zeros((1, 3)), 3)
    with pytest.raises(ValueError):
        f.query(np.zeros((1, 3)), np.zeros((1, 3)), 0)


def test_output_ranges():
    f = small_field(3)
    rng = np.random.default_rng(3)
    x, d = rng.normal(scale=5, size=(10000, 3)), rng.normal(size=(10000, 3))
    c, s = f.query(x, d)
    assert np.all((s.data > 0) & (s.data < 1))
    assert np.all((c.data >= 0) & (c.data <= 1))
    v = f.visibility(x, d).data
    assert np.all((v > 0) & (v < 1))


def test_directions_shared_per_ray_match_repeated():
    f = small_field(2)
    rng = np.random.default_rng(4)
    x, d = rng.normal(size=(12, 3)), rng.normal(size=(3, 3))
    c, s = f.query(x, d)
    c2, s2 = f.query(x, np.repeat(d, 4, axis=0))
    assert np.allclose(c.data, c2.data, atol=1e-12) and np.allclose(s.data, s2.data, atol=1e-12)


def test_gradient_reaches_every_stage():
    f = small_field(3)
    rng = np.random.default_rng(5)
    x, d = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    with Tape() as tape:
        c, s = f.query(x, d)
        tape.backward(ad.sum(c) + ad.sum(s))
    for i, st_ in enumerate(f.stages):
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in st_.parameters().values()), i


def test_freeze_previous_limits_trainables():
    f = small_field(2, freeze_previous=True)
    names = set(f.trainable_parameters())
    assert not any(n.startswith("stage0.") for n in names)
    assert any(n.startswith("stage1.") for n in names)


def test_checkpoint_roundtrip_after_add_stage(tmp_path):
    f = small_field(1)
    f.add_stage()
    for p in f.stages[1].parameters().values():
        p.data += 0.01
    ad.save_checkpoint(tmp_path / "f.ckpt", f.state_arrays(), {"stage_count": f.n_stages})
    header, arrays = ad.load_checkpoint(tmp_path / "f.ckpt")
    g = field_from_arrays(f.config, header["stage_count"], arrays)
    for k, p in f.parameters().items():
        assert p.data.tobytes() == g.parameters()[k].data.tobytes()


def test_schedule_frames():
    s = StageSchedule(756, 3)
    sizes = [len(schedule_frames(s, i)) for i in (1, 2, 3)]
    assert sizes == [189, 378, 756]
    assert schedule_frames(StageSchedule(10, 1), 1) == list(range(10))
    with pytest.raises(ValueError):
        schedule_frames(s, 4)


@given(st.integers(1, 300), st.integers(1, 5))
def test_schedule_monotone_inclusion(n, S):
    s = StageSchedule(n, S)
    for i in range(1, S):
        assert set(schedule_frames(s, i)) <= set(schedule_frames(s, i + 1))
    assert schedule_frames(s, S) == list(range(n))


class SlabField:
    """Density 3 inside the slab 1 < z < 2, zero elsewhere."""

    def radiance(self, x, d, active_stages=None):
        sig = np.where((x[:, 2] > 1) & (x[:, 2] < 2), 3.0, 0.0)
        return ad.Tensor(np.full((len(x), 3), 0.5)), ad.Tensor(sig)


def test_visibility_head_learns_rendered_transmittance():
    rng = np.random.default_rng(6)
    f = small_field(1, encoding=EncodingConfig(position_bands=3, direction_bands=0))
    origins = np.zeros((256, 3))
    origins[:, :2] = rng.uniform(-0.5, 0.5, (256, 2))
    dirs = np.tile([0.0, 0.0, 1.0], (256, 1))
    b = render_rays(SlabField(), origins, dirs, 0.0, 3.0, RenderConfig(samples_per_ray=16))
    pts, targets = b.points.reshape(-1, 3), b.transmittance.data.reshape(-1)
    opt = Adam(f.visibility_head.parameters(), lr=1e-2)
    for _ in range(400):
        with Tape() as tape:
            tape.backward(trans_loss(f.visibility(pts, np.repeat(dirs, 16, axis=0)), targets))
        opt.step()
    err = np.mean(np.abs(f.visibility(pts, np.repeat(dirs, 16, axis=0)).data - targets))
    assert err < 0.1
