"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient; outside a tape every op is a plain
numpy computation, which is what rendering uses.

Implicit broadcasting is limited to leading batch dimensions: the shorter
shape must be a suffix of the longer one (or a scalar). Anything else goes
through :func:`broadcast_to` explicitly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "ShapeError", "Adam", "AdamState", "adam_step",
    "matmul", "linear", "repeat_rows", "add", "sub", "mul", "div", "neg", "concat", "take", "slice_", "reshape",
    "broadcast_to", "sum", "mean", "relu", "sigmoid", "softplus", "sin", "cos", "exp",
    "abs", "sqrt", "square", "smooth_l1", "clip", "cumsum", "maximum", "pad2d",
    "save_checkpoint", "load_checkpoint",
]

_active: list[Tape] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter(Tensor):
    """A trainable leaf tensor; gradients accumulate into ``.grad``."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    grad_fn: Callable


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[int, Tensor] = {}

    def __enter__(self) -> Tape:
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def record(self, op, inputs, output, grad_fn):
        for t in inputs:
            if t.is_leaf and t.requires_grad:
                self.parameters.setdefault(id(t), t)
        output.is_leaf = False
        self.nodes.append(Node(op, tuple(inputs), output, grad_fn))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every leaf's ``.grad``."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.grad_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    k = id(inp)
                    grads[k] = gi if k not in grads else grads[k] + gi
        if loss.is_leaf and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def _tape_for(*inputs) -> Tape | None:
    if not _active:
        return None
    for t in inputs:
        if t.requires_grad:
            return _active[-1]
    return None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, inputs, out_data, grad_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _tape_for(*inputs)
    if tape is not None:
        out.requires_grad = True
        tape.record(op, inputs, out, grad_fn)
    return out


def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-dim broadcasting)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), out, grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def linear(x, W, b, activation: str | None = None) -> Tensor:
    """Fused ``act(x @ W + b)`` for (N, K) x (K, M); ``activation`` is None or "relu"."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {W.shape}, {b.shape}")
    out = x.data @ W.data
    out += b.data
    if activation == "relu":
        np.maximum(out, 0.0, out=out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")

    def grad_fn(g):
        if activation == "relu":
            g = g * (out > 0)
        return (g @ W.data.T if x.requires_grad else None,
                x.data.T @ g if W.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _emit("linear", (x, W, b), out, grad_fn)


def repeat_rows(a, repeats: int) -> Tensor:
    """``np.repeat(a, repeats, axis=0)``: each row becomes ``repeats`` consecutive rows."""
    a = _as_tensor(a)
    n = a.shape[0]
    return _emit("repeat_rows", (a,), np.repeat(a.data, repeats, axis=0),
                 lambda g: (g.reshape((n, repeats) + a.shape[1:]).sum(axis=1),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant."""
    a = _as_tensor(a)
    keep = a.data >= floor
    return _emit("maximum", (a,), np.where(keep, a.data, floor), lambda g: (g * keep,))


# ----------------------------------------------------------------- unary ops

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _emit("relu", (a,), out, lambda g: (g * (out > 0),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("softplus", (a,), np.logaddexp(0.0, a.data), lambda g: (g * _sigmoid(a.data),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("cos", (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _emit("exp", (a,), e, lambda g: (g * e,))


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    r = np.sqrt(a.data)
    return _emit("sqrt", (a,), r, lambda g: (g * 0.5 / r,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Huber-style loss per element: ``0.5 x^2 / beta`` inside ``|x| < beta``, else ``|x| - beta/2``."""
    a = _as_tensor(a)
    x = a.data
    inside = np.abs(x) < beta
    out = np.where(inside, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return _emit("smooth_l1", (a,), out, lambda g: (g * np.where(inside, x / beta, np.sign(x)),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


# ------------------------------------------------------------ shape / reduce

def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", (a,), out, grad_fn)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast (numpy rules); gradient sums over the expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e

    def grad_fn(g):
        lead = len(shape) - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _emit("broadcast_to", (a,), out, grad_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=ax),
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_(a, key) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    a = _as_tensor(a)
    out = a.data[key]
    basic = isinstance(key, (slice, int)) or (
        isinstance(key, tuple) and all(isinstance(k, (slice, int, type(Ellipsis))) for k in key))

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _emit("slice", (a,), out, grad_fn)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows (or entries along ``axis``) by integer index."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if axis == 0 and a.ndim == 2 and idx.ndim == 1:
            # bincount per column is much faster than add.at for row gathers
            n = a.shape[0]
            for c in range(a.shape[1]):
                full[:, c] = np.bincount(idx, weights=g[:, c], minlength=n)
        else:
            np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
        return (full,)

    return _emit("take", (a,), out, grad_fn)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _emit("cumsum", (a,), np.cumsum(a.data, axis=axis), grad_fn)


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes of an (H, W, C) tensor."""
    a = _as_tensor(a)
    if pad == 0:
        return a
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2)
    return _emit("pad2d", (a,), np.pad(a.data, widths),
                 lambda g: (g[pad:-pad, pad:-pad],))


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], lr: float | None = None):
    """One bias-corrected Adam update over ``params``; zeroes gradients afterwards."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        adam_step(self.state, self.params, lr)

    def add_params(self, params: dict[str, Tensor]):
        self.params.update(params)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"TUBERFCK"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict | None = None):
    """Write named float64 arrays (little-endian) after a JSON header.

    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, then the
    raw data of every array in header order.
    """
    header = dict(header or {})
    header.setdefault("format_version", FORMAT_VERSION)
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header["tensors"] = entries
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    base = 16 + n
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"]).astype(np.float64)
    return header, arrays
