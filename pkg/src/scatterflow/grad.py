"""Small reverse-mode differentiation engine over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the active
:class:`Tape` whenever one of their inputs requires a gradient. Each
recorded node carries a vector-Jacobian product; :func:`backward` walks the
tape in reverse and accumulates gradients by summation.

    with Tape() as tape:
        y = gd.sum(gd.mul(x, x))
    (gx,) = backward(tape, y, [x])

Everything is float64. A tape is single-threaded; separate threads may run
separate tapes concurrently.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_produced", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._produced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, node):
        self.nodes.append(node)


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active():
    s = _stack()
    return s[-1] if s else None


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def _record(op, inputs, value, vjp):
    """Wrap ``value`` and register the node if any input needs a gradient."""
    out = Tensor(value)
    tape = _active()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        tape.record(Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b):
    x, y = _data(a), _data(b)
    _check_broadcast("add", x, y)
    return _record("add", (a, b), x + y,
                   lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b):
    x, y = _data(a), _data(b)
    _check_broadcast("sub", x, y)
    return _record("sub", (a, b), x - y,
                   lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


def mul(a, b):
    x, y = _data(a), _data(b)
    _check_broadcast("mul", x, y)
    return _record("mul", (a, b), x * y,
                   lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b):
    x, y = _data(a), _data(b)
    _check_broadcast("div", x, y)
    return _record("div", (a, b), x / y,
                   lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / y**2, y.shape)))


def neg(a):
    return _record("neg", (a,), -_data(a), lambda g: (-g,))


def square(a):
    x = _data(a)
    return _record("square", (a,), x * x, lambda g: (2 * g * x,))


def exp(a):
    v = np.exp(_data(a))
    return _record("exp", (a,), v, lambda g: (g * v,))


def log(a):
    x = _data(a)
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def tanh(a):
    v = np.tanh(_data(a))
    return _record("tanh", (a,), v, lambda g: (g * (1 - v * v),))


def leaky_relu(a, alpha=0.2):
    x = _data(a)
    slope = np.where(x > 0, 1.0, alpha)
    return _record("leaky_relu", (a,), x * slope, lambda g: (g * slope,))


def relu(a):
    x = _data(a)
    mask = (x > 0).astype(float)
    return _record("relu", (a,), x * mask, lambda g: (g * mask,))


def scale_shift(a, scale, shift=0.0):
    """Elementwise ``a * scale + shift`` with constant (non-differentiated) scale and shift."""
    x = _data(a)
    return _record("scale_shift", (a,), x * scale + shift, lambda g: (_unbroadcast(g * scale, x.shape),))


def channel_affine(a, scale, shift):
    """Per-channel ``a * scale[c] + shift[c]`` over axis 1 of a (B, C, ...) tensor."""
    x, s, b = _data(a), _data(scale), _data(shift)
    if s.shape != (x.shape[1],) or b.shape != (x.shape[1],):
        raise ValueError(f"channel_affine: channels {x.shape[1]} vs scale {s.shape} / shift {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    out = x * s.reshape(view) + b.reshape(view)
    return _record("channel_affine", (a, scale, shift), out,
                   lambda g: (g * s.reshape(view), (g * x).sum(axis=red), g.sum(axis=red)))


# -- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    x = _data(a)
    v = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (a,), v, vjp)


def mean(a, axis=None, keepdims=False):
    x = _data(a)
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return scale_shift(sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    x = _data(a)
    return _record("reshape", (a,), x.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(a, axes=None):
    x = _data(a)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _record("transpose", (a,), x.transpose(axes), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    x = _data(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def vjp(g):
        out = np.zeros_like(x)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record("slice", (a,), x[idx], vjp)


def concat(tensors: Sequence, axis=0):
    arrays = [_data(t) for t in tensors]
    try:
        v = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[a.shape for a in arrays]} along axis {axis}") from None
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _record("concat", tuple(tensors), v, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    x, y = _data(a), _data(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    v = x @ y

    def vjp(g):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _record("matmul", (a, b), v, vjp)


def channel_matmul(a, w):
    """1x1 convolution: ``out[b, o, ...] = sum_c w[o, c] a[b, c, ...]``."""
    x, m = _data(a), _data(w)
    if m.ndim != 2 or x.shape[1] != m.shape[1]:
        raise ValueError(f"channel_matmul: input channels {x.shape[1]} vs weight {m.shape}")
    xm = np.moveaxis(x, 1, -1)
    v = np.moveaxis(xm @ m.T, -1, 1)

    def vjp(g):
        gm = np.moveaxis(g, 1, -1)
        gx = np.moveaxis(gm @ m, -1, 1)
        gw = gm.reshape(-1, m.shape[0]).T @ xm.reshape(-1, m.shape[1])
        return gx, gw

    return _record("channel_matmul", (a, w), v, vjp)


def inv(a):
    x = _data(a)
    v = np.linalg.inv(x)
    return _record("inv", (a,), v, lambda g: (-v.T @ g @ v.T,))


def pinv(a):
    """Left pseudo-inverse (W^T W)^-1 W^T of a full-column-rank matrix."""
    w = _data(a)
    if w.ndim != 2 or w.shape[0] < w.shape[1]:
        raise ValueError(f"pinv: expected a tall matrix, got {w.shape}")
    gram_inv = np.linalg.inv(w.T @ w)
    p = gram_inv @ w.T

    def vjp(g):
        resid = np.eye(w.shape[0]) - w @ p
        return (-p.T @ g @ p.T + resid @ g.T @ gram_inv,)

    return _record("pinv", (a,), p, vjp)


def logabsdet(a):
    x = _data(a)
    _, v = np.linalg.slogdet(x)
    return _record("logabsdet", (a,), np.asarray(v), lambda g: (g * np.linalg.inv(x).T,))


def half_logdet_gram(a):
    """0.5 log det(W^T W) for a tall full-column-rank matrix."""
    w = _data(a)
    _, v = np.linalg.slogdet(w.T @ w)
    return _record("half_logdet_gram", (a,), np.asarray(0.5 * v), lambda g: (g * np.linalg.pinv(w).T,))


# -- convolution ---------------------------------------------------------------

def _im2col(x, k):
    """Rows are output pixels (b, i, j); columns are (di, dj, c)."""
    b, c, h, w = x.shape
    pad = k // 2
    xl = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    xl[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((b, h, w, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xl[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, k * k * c)


def _kmat(w):
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv(x, w):
    b, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    out = _im2col(x, k) @ _kmat(w).T
    return out.reshape(b, h, wd, cout).transpose(0, 3, 1, 2)


def conv2d(a, w, bias=None):
    """Stride-1 'same' convolution (cross-correlation) of a (B, C, H, W) tensor."""
    x, k = _data(a), _data(w)
    if x.ndim != 4 or k.ndim != 4 or k.shape[1] != x.shape[1] or k.shape[2] != k.shape[3] or k.shape[2] % 2 == 0:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    b, c, h, wd = x.shape
    cout, _, ks, _ = k.shape
    cols = _im2col(x, ks)
    out = cols @ _kmat(k).T
    if bias is not None:
        out += _data(bias)
    out = out.reshape(b, h, wd, cout).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(cout, ks, ks, c).transpose(0, 3, 1, 2)
        flipped = k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _conv(g, flipped)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    inputs = (a, w) if bias is None else (a, w, bias)
    return _record("conv2d", inputs, out, vjp)


# -- user primitives -------------------------------------------------------------

def primitive(name, fn):
    """Turn ``fn(*arrays) -> (value, vjp)`` into a taped operation."""

    def wrapped(*inputs):
        value, vjp = fn(*[_data(t) for t in inputs])
        return _record(name, inputs, value, vjp)

    wrapped.__name__ = name
    return wrapped


# -- backward -------------------------------------------------------------------

def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor] | None = None):
    """Reverse sweep from a scalar ``root``.

    Gradients of leaf tensors are accumulated into ``leaf.grad``. Returns a
    list of gradients for ``wrt`` (zeros for leaves the root does not depend
    on), or a dict ``{leaf: grad}`` for every leaf reached when ``wrt`` is None.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.vjp(g)
        for t, gi in zip(node.inputs, parts):
            if not isinstance(t, Tensor) or not t.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=float)
            if gi.shape != t.shape:
                gi = _unbroadcast(gi, t.shape).reshape(t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not t._produced:
                leaves[key] = t
    if not root._produced and root.requires_grad:
        leaves[id(root)] = root
    result = {}
    for key, t in leaves.items():
        g = grads.get(key, np.zeros_like(t.data))
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    if wrt is None:
        return result
    return [result.get(t, np.zeros_like(t.data)) for t in wrt]


def value_and_grad(fn, *args):
    """Evaluate ``fn`` on fresh leaves built from ``args``; return (value, [grads])."""
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in args]
    with Tape() as tape:
        out = fn(*leaves)
    return out.item(), backward(tape, out, leaves)


# -- optimizer ----------------------------------------------------------------

def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``state`` is ``{"step": int, "m": [...], "v": [...]}``; pass ``None`` to start.
    """
    if state is None:
        state = {"step": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    step = state["step"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"step": step, "m": new_m, "v": new_v}


class Adam:
    """Adam over a list of leaf tensors, updating ``tensor.data`` between passes."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = None

    def step(self, grads, lr=None):
        new, self.state = adam_step(
            [p.data for p in self.params], grads, self.state,
            self.lr if lr is None else lr, self.beta1, self.beta2, self.eps,
        )
        for p, d in zip(self.params, new):
            p.data = d
