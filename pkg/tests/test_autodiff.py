import math

import numpy as np
import pytest
from gradcheck import analytic_grad, numeric_grad, relative_error
from hypothesis import given
from hypothesis import strategies as st

from tuberf import autodiff as ad
from tuberf.autodiff import Adam, AdamState, Parameter, ShapeError, Tape, Tensor, adam_step


def away_from(x, points, gap=1e-3):
    """Nudge entries so no element sits within ``gap`` of a kink."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return x


def _unary(op, lo=-2.0, hi=2.0, kinks=()):
    def make(rng):
        x = Parameter(away_from(rng.uniform(lo, hi, (3, 4)), kinks))
        w = rng.normal(size=(3, 4))
        return [x], lambda: ad.sum(op(x) * w)
    return make


def _binary(op, positive_b=False):
    def make(rng):
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.uniform(0.5, 2.0, (4,)) if positive_b else rng.normal(size=(4,)))
        w = rng.normal(size=(3, 4))
        return [a, b], lambda: ad.sum(op(a, b) * w)
    return make


def _matmul(rng):
    a, b = Parameter(rng.normal(size=(3, 5))), Parameter(rng.normal(size=(5, 2)))
    w = rng.normal(size=(3, 2))
    return [a, b], lambda: ad.sum(ad.matmul(a, b) * w)


def _linear(rng):
    x, W, b = Parameter(rng.normal(size=(4, 3))), Parameter(rng.normal(size=(3, 5))), Parameter(rng.normal(size=5))
    w = rng.normal(size=(4, 5))
    return [x, W, b], lambda: ad.sum(ad.linear(x, W, b, "relu") * w) + ad.sum(ad.linear(x, W, b) * w)


def _concat(rng):
    a, b = Parameter(rng.normal(size=(3, 2))), Parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 6))
    return [a, b], lambda: ad.sum(ad.concat([a, b], axis=1) * w)


def _slice(rng):
    a = Parameter(rng.normal(size=(5, 4)))
    idx = np.array([0, 2, 2, 4])
    w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=(4, 4))
    return [a], lambda: ad.sum(a[1:3, :3] * w1) + ad.sum(a[idx] * w2)


def _take(rng):
    a = Parameter(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, 10)
    w = rng.normal(size=(10, 3))
    b = Parameter(rng.normal(size=(4, 5, 2)))
    j = rng.integers(0, 5, 7)
    w2 = rng.normal(size=(4, 7, 2))
    return [a, b], lambda: ad.sum(ad.take(a, idx) * w) + ad.sum(ad.take(b, j, axis=1) * w2)


def _reduce(rng):
    a = Parameter(rng.normal(size=(3, 4)))
    w0, w1 = rng.normal(size=4), rng.normal(size=3)
    return [a], lambda: ad.sum(ad.sum(a, 0) * w0) + ad.sum(ad.mean(a, 1) * w1) + ad.mean(a) * 0.7


def _reshape_broadcast(rng):
    a = Parameter(rng.normal(size=(3, 1)))
    b = Parameter(rng.normal(size=(2,)))
    w = rng.normal(size=(2, 3, 4))
    w2 = rng.normal(size=(3, 2))
    return [a, b], lambda: (ad.sum(ad.broadcast_to(a, (2, 3, 4)) * w)
                            + ad.sum(ad.reshape(ad.broadcast_to(b, (3, 2)), (6,)) * w2.ravel()))


def _cumsum(rng):
    a = Parameter(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    return [a], lambda: ad.sum(ad.cumsum(a, axis=-1) * w)


def _pad2d(rng):
    a = Parameter(rng.normal(size=(3, 4, 2)))
    w = rng.normal(size=(7, 8, 2))
    return [a], lambda: ad.sum(ad.pad2d(a, 2) * w)


def _repeat_rows(rng):
    a = Parameter(rng.normal(size=(3, 2)))
    w = rng.normal(size=(9, 2))
    return [a], lambda: ad.sum(ad.repeat_rows(a, 3) * w)


def _maximum(rng):
    a = Parameter(away_from(rng.normal(size=(3, 4)), [0.1]))
    w = rng.normal(size=(3, 4))
    return [a], lambda: ad.sum(ad.maximum(a, 0.1) * w)


def _smooth_l1(rng):
    beta = 0.7
    a = Parameter(away_from(rng.uniform(-2, 2, (3, 4)), [-beta, beta]))
    w = rng.normal(size=(3, 4))
    return [a], lambda: ad.sum(ad.smooth_l1(a, beta) * w)


PRIMITIVES = {
    "add": _binary(ad.add), "sub": _binary(ad.sub), "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True), "matmul": _matmul, "linear": _linear, "concat": _concat,
    "slice": _slice, "take": _take, "sum_mean": _reduce, "reshape_broadcast": _reshape_broadcast,
    "cumsum": _cumsum, "pad2d": _pad2d, "repeat_rows": _repeat_rows, "maximum": _maximum,
    "neg": _unary(ad.neg), "relu": _unary(ad.relu, kinks=[0.0]), "sigmoid": _unary(ad.sigmoid),
    "softplus": _unary(ad.softplus), "sin": _unary(ad.sin), "cos": _unary(ad.cos), "exp": _unary(ad.exp),
    "abs": _unary(ad.abs, kinks=[0.0]), "sqrt": _unary(ad.sqrt, 0.2, 3.0), "square": _unary(ad.square),
    "clip": _unary(lambda x: ad.clip(x, -0.5, 0.8), kinks=[-0.5, 0.8]), "smooth_l1": _smooth_l1,
}


def primitive_gradient_error(name: str, seeds: int = 50) -> float:
    worst = 0.0
    for seed in range(seeds):
        params, f = PRIMITIVES[name](np.random.default_rng(seed))
        worst = max(worst, relative_error(analytic_grad(f, params), numeric_grad(f, params)))
    return worst


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    worst = primitive_gradient_error(name)
    assert worst < 1e-4, worst


def test_forward_values():
    assert math.isclose(float(ad.softplus(0.0).data), math.log(2), rel_tol=1e-12)
    assert float(ad.sigmoid(0.0).data) == 0.5
    assert float(ad.smooth_l1(0.5, 1.0).data) == 0.125
    assert float(ad.smooth_l1(2.0, 1.0).data) == 1.5
    assert float(ad.smooth_l1(-2.0, 1.0).data) == 1.5
    assert np.all(np.isfinite(ad.sigmoid(np.array([-1e4, 1e4])).data))
    assert np.all(np.isfinite(ad.softplus(np.array([-1e4, 1e4])).data))


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3,\)"):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_leading_dim_broadcasting():
    a = Parameter(np.ones((2, 3)))
    b = Parameter(np.arange(3.0))
    with Tape() as tape:
        tape.backward(ad.sum(a * b))
    assert np.allclose(b.grad, [2, 2, 2])


def test_linear_case_grad_equals_input():
    x = np.array([1.0, -2.0, 3.0])
    w = Parameter(np.zeros(3))
    with Tape() as tape:
        tape.backward(ad.sum(w * x))
    assert np.array_equal(w.grad, x)


def test_backward_requires_scalar():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        y = w * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_two_backward_calls_accumulate():
    w = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with Tape() as tape:
            tape.backward(ad.sum(ad.square(w)))
    assert np.allclose(w.grad, 2 * 2 * w.data)


def test_ops_outside_tape_record_nothing():
    w = Parameter(np.ones(3))
    y = ad.exp(w)
    assert not y.requires_grad
    with Tape() as tape:
        ad.exp(Tensor(np.ones(3)))
    assert tape.nodes == []


def _graph(w, x):
    return ad.sum(ad.sigmoid(ad.linear(x, w, np.zeros(2))))


def test_determinism_and_tape_reuse():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w0 = rng.normal(size=(3, 2))
    results = []
    for _ in range(2):
        w = Parameter(w0.copy())
        with Tape() as tape:
            y = _graph(w, x)
            tape.backward(y)
        results.append((y.data.tobytes(), w.grad.tobytes(), len(tape.nodes)))
    assert results[0] == results[1]


def test_adam_zero_grad_unchanged():
    p = Parameter(np.array([1.0, 2.0]))
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])
    assert p.grad is None


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]), st.floats(1e-4, 1e-1))
def test_adam_first_step_is_lr(g, sign, lr):
    p = Parameter(np.array([0.0]))
    state = AdamState(lr=lr)
    p.grad = np.array([sign * g])
    adam_step(state, {"p": p})
    assert abs(abs(p.data[0]) - lr) < lr * 1e-4
    assert np.sign(p.data[0]) == -sign


def test_adam_quadratic_bowl():
    w = Parameter(np.array([1.0]))
    opt = Adam({"w": w}, lr=1e-2)
    for _ in range(2000):
        with Tape() as tape:
            tape.backward(ad.sum(ad.square(w)))
        opt.step()
    assert abs(w.data[0]) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.array(2.5)}
    ad.save_checkpoint(tmp_path / "x.ckpt", arrays, {"stage_count": 2})
    header, back = ad.load_checkpoint(tmp_path / "x.ckpt")
    assert header["stage_count"] == 2 and header["format_version"] == 1
    for k, v in arrays.items():
        assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path / "bad.ckpt")
