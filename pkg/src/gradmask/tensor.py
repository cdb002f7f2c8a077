"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

Only the operations needed by the restoration U-Net and its losses are
provided. Every op builds a fresh graph node on each call; ``backward``
walks the graph once in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class GraphError(RuntimeError):
    """Raised on misuse of the backward graph (non-scalar loss, reuse)."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph nodes (inference / finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A float64 array with an optional gradient buffer and graph node."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self.node is None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, op, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _make(np.where(active, x.data, 0.0), (x,), "relu",
                 lambda g: (np.where(active, g, 0.0),))


def abs_(x) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def huber(x, beta: float) -> Tensor:
    """Elementwise smooth-L1 kernel: 0.5*x^2/beta inside |x|<beta, |x|-0.5*beta outside."""
    x = as_tensor(x)
    d = x.data
    inside = np.abs(d) < beta
    out = np.where(inside, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    slope = np.where(inside, d / beta, np.sign(d))
    return _make(out, (x,), "huber", lambda g: (g * slope,))


# ---------------------------------------------------------------- reductions

def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _make(np.array(x.data.mean()), (x,), "mean",
                 lambda g: (np.full(shape, float(g) / n),))


def sum_(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), "sum",
                 lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------- reshaping

def slice_flat(x, offset: int, length: int, shape) -> Tensor:
    """View ``x[offset:offset+length]`` of a 1-D tensor reshaped to ``shape``."""
    x = as_tensor(x)
    if x.data.ndim != 1 or offset < 0 or offset + length > x.size:
        raise ShapeError(f"slice_flat: [{offset}:{offset + length}] outside {x.shape}")
    if int(np.prod(shape)) != length:
        raise ShapeError(f"slice_flat: shape {tuple(shape)} does not hold {length} values")
    total = x.size

    def backward_fn(g):
        full = np.zeros(total)
        full[offset:offset + length] = g.ravel()
        return (full,)

    return _make(x.data[offset:offset + length].reshape(shape), (x,), "slice", backward_fn)


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat",
                 lambda g: (g[:, :ca], g[:, ca:]))


def channel_mix(x, weights) -> Tensor:
    """Weighted sum over the channel axis: [N,C,H,W] -> [N,1,H,W]."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=np.float64)
    if x.data.ndim != 4 or x.shape[1] != w.size:
        raise ShapeError(f"channel_mix: {w.size} weights for input {x.shape}")
    out = np.tensordot(w, x.data, axes=([0], [1]))[:, None]
    return _make(out, (x,), "channel_mix",
                 lambda g: (g * w[None, :, None, None],))


# ---------------------------------------------------------------- spatial ops

def _check_nchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D NCHW tensor, got {x.shape}")


def _windows2(d: np.ndarray) -> np.ndarray:
    n, c, h, w = d.shape
    return d.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)


def _check_even(x: Tensor, op: str) -> None:
    _check_nchw(x, op)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{op}: H and W must be even, got {x.shape[2]}x{x.shape[3]}")


def maxpool2(x) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first element in row-major order."""
    x = as_tensor(x)
    _check_even(x, "maxpool2")
    win = _windows2(x.data)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward_fn(g):
        n, c, h2, w2 = g.shape
        scat = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(scat, arg[..., None], g[..., None], axis=-1)
        dx = scat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return (dx,)

    out_t = _make(out, (x,), "maxpool2", backward_fn)
    return out_t


def maxpool2_argmax(x: np.ndarray) -> np.ndarray:
    return np.argmax(_windows2(x), axis=-1)


def avgpool2(x) -> Tensor:
    x = as_tensor(x)
    _check_even(x, "avgpool2")
    out = _windows2(x.data).mean(axis=-1)
    return _make(out, (x,), "avgpool2",
                 lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,))


def upsample_nearest2(x) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "upsample_nearest2")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), "upsample_nearest2", backward_fn)


def _im2col(x: np.ndarray) -> np.ndarray:
    # channels-last gather: the copy reads contiguous channel runs
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _wmat(w: np.ndarray) -> np.ndarray:
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_raw(x: np.ndarray, w: np.ndarray):
    cols = _im2col(x)
    return cols @ _wmat(w).T, cols


def conv2d(x, weight, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_nchw(x, "conv2d")
    n, cin, h, wd = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected weight [Cout,Cin,3,3], got {weight.shape}")
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv2d: weight expects Cin={weight.shape[1]}, input has Cin={cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: expected bias [{cout}], got {bias.shape}")
    wdat = weight.data
    flat, cols = _conv_raw(x.data, wdat)
    flat += bias.data
    out = flat.reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    keep = grad_enabled() and (weight.requires_grad or bias.requires_grad or x.requires_grad)
    cols = cols if keep else None

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gmat.T @ cols).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
        db = gmat.sum(axis=0)
        dx = None
        if x.requires_grad:
            flipped = wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dflat, _ = _conv_raw(g, flipped)
            dx = dflat.reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        return (dx, dw, db)

    return _make(np.ascontiguousarray(out), (x, weight, bias), "conv2d", backward_fn)


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t.node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.inputs:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable leaf with d(loss)/d(leaf).

    Gradients accumulate into existing buffers. The graph is released
    afterwards, so a second call without a new forward pass raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = (0.0 if loss.grad is None else loss.grad) + np.ones(loss.shape)
            return
        raise GraphError("loss does not depend on any tensor requiring grad")
    if loss.node.consumed:
        raise GraphError("graph already consumed by a previous backward call")
    order = _topo(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for t in reversed(order):
        node = t.node
        g = grads.pop(id(t), None)
        if g is None:
            node.consumed = True
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.zeros(inp.shape)
                inp.grad += gi
            elif inp.node.consumed:
                raise GraphError("graph already consumed by a previous backward call")
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        node.consumed = True
        node.backward_fn = None
