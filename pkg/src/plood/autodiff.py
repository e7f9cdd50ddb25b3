"""Reverse-mode automatic differentiation over dense float64 arrays.

Eager tape: every operation evaluates immediately, caches its output in a
graph node, and records a backward closure. The op set is fixed to what the
small conv backbone needs: matmul, 3x3 same-padding convolution, 2x2
max-pool, elementwise add/sub/mul (with limited broadcasting for biases and
mean-centering), relu, softmax over the last axis, natural log, clamp-at-
floor, mean/sum reductions, concat and reshape. No GPU, no dynamic shapes.
"""

from __future__ import annotations

import itertools

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction/execution failures."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_ids = itertools.count()


class Tensor:
    """Node in the computation DAG: cached float64 value plus backward closure.

    Leaf tensors (parameters, inputs, constants) have no parents. Gradients
    are populated by :func:`backward` for every node of the traversed graph.
    """

    __slots__ = ("data", "grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = _op
        self.node_id = next(_ids)
        self._parents = tuple(_parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op!r}, id={self.node_id}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op):
    out = Tensor(data, parents, op)
    if not np.isfinite(out.data).all():
        raise NonFiniteError(f"{op}: non-finite output at node {out.node_id}")
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(t, g):
    """Accumulate a gradient contribution (out-of-place; aliases are safe
    because no closure mutates a .grad array after assignment)."""
    t.grad = g if t.grad is None else t.grad + g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(
            f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast "
            f"(nodes {a.node_id}, {b.node_id})"
        ) from None
    out = _node(data, (a, b), "add")

    def _back():
        _acc(a, _unbroadcast(out.grad, a.data.shape))
        _acc(b, _unbroadcast(out.grad, b.data.shape))

    out._backward = _back
    return out


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(
            f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast "
            f"(nodes {a.node_id}, {b.node_id})"
        ) from None
    out = _node(data, (a, b), "sub")

    def _back():
        _acc(a, _unbroadcast(out.grad, a.data.shape))
        _acc(b, -_unbroadcast(out.grad, b.data.shape))

    out._backward = _back
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(
            f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast "
            f"(nodes {a.node_id}, {b.node_id})"
        ) from None
    out = _node(data, (a, b), "mul")

    def _back():
        _acc(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _acc(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = _back
    return out


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape} "
            f"(nodes {a.node_id}, {b.node_id})"
        )
    out = _node(a.data @ b.data, (a, b), "matmul")

    def _back():
        _acc(a, out.grad @ b.data.T)
        _acc(b, a.data.T @ out.grad)

    out._backward = _back
    return out


def relu(x):
    x = _wrap(x)
    out = _node(np.maximum(x.data, 0.0), (x,), "relu")

    def _back():
        _acc(x, out.grad * (x.data > 0.0))

    out._backward = _back
    return out


def log(x):
    x = _wrap(x)
    out = _node(np.log(x.data), (x,), "log")

    def _back():
        _acc(x, out.grad / x.data)

    out._backward = _back
    return out


def clamp_min(x, floor):
    """Elementwise max(x, floor); gradient is zero on the clamped region."""
    x = _wrap(x)
    out = _node(np.maximum(x.data, floor), (x,), "clamp_min")

    def _back():
        _acc(x, out.grad * (x.data >= floor))

    out._backward = _back
    return out


def softmax(x):
    """Row-wise softmax over the last axis (max-shifted for stability)."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _node(s, (x,), "softmax")

    def _back():
        g = out.grad
        dot = (g * s).sum(axis=-1, keepdims=True)
        _acc(x, (g - dot) * s)

    out._backward = _back
    return out


def mean(x, axis=None):
    x = _wrap(x)
    out = _node(x.data.mean(axis=axis), (x,), "mean")
    n = x.data.size if axis is None else x.data.shape[axis]

    def _back():
        if axis is None:
            _acc(x, np.broadcast_to(out.grad / n, x.data.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(out.grad, axis) / n, x.data.shape))

    out._backward = _back
    return out


def tsum(x, axis=None):
    x = _wrap(x)
    out = _node(x.data.sum(axis=axis), (x,), "sum")

    def _back():
        if axis is None:
            _acc(x, np.broadcast_to(out.grad, x.data.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(out.grad, axis), x.data.shape))

    out._backward = _back
    return out


def reshape(x, shape):
    x = _wrap(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(
            f"reshape: cannot view {x.data.shape} as {shape} (node {x.node_id})"
        ) from None
    out = _node(data, (x,), "reshape")

    def _back():
        _acc(x, out.grad.reshape(x.data.shape))

    out._backward = _back
    return out


def concat(parts, axis=-1):
    parts = [_wrap(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.data.shape for p in parts]} on axis {axis}"
        ) from None
    out = _node(data, tuple(parts), "concat")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def _back():
        for p, g in zip(parts, np.split(out.grad, offsets, axis=axis)):
            _acc(p, g)

    out._backward = _back
    return out


def conv2d(x, w):
    """3x3 convolution, stride 1, same (zero) padding.

    x: (B, C, H, W), w: (O, C, 3, 3) -> (B, O, H, W).
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError(
            f"conv2d: expected image (B,C,H,W) and kernel (O,C,3,3), got "
            f"{x.data.shape} and {w.data.shape} (nodes {x.node_id}, {w.node_id})"
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: channel mismatch {x.data.shape} vs {w.data.shape} "
            f"(nodes {x.node_id}, {w.node_id})"
        )
    b, c, h, wd = x.data.shape
    o = w.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, wd))
    for k, (dy, dx) in enumerate((i, j) for i in range(3) for j in range(3)):
        cols[:, :, k] = xp[:, :, dy : dy + h, dx : dx + wd]
    cols3 = cols.reshape(b, c * 9, h * wd)
    wk = w.data.reshape(o, c * 9)
    out = _node(np.matmul(wk[None], cols3).reshape(b, o, h, wd), (x, w), "conv2d")

    def _back():
        g3 = out.grad.reshape(b, o, h * wd)
        _acc(w, np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 3, 3))
        gcols = np.matmul(wk.T[None], g3).reshape(b, c, 9, h, wd)
        gxp = np.zeros_like(xp)
        for k, (dy, dx) in enumerate((i, j) for i in range(3) for j in range(3)):
            gxp[:, :, dy : dy + h, dx : dx + wd] += gcols[:, :, k]
        _acc(x, gxp[:, :, 1 : h + 1, 1 : wd + 1].copy())

    out._backward = _back
    return out


def maxpool2(x):
    """2x2 max-pool, stride 2. Ties route the gradient to the first maximum."""
    x = _wrap(x)
    if x.data.ndim != 4 or x.data.shape[2] % 2 or x.data.shape[3] % 2:
        raise ShapeError(
            f"maxpool2: expected (B,C,2m,2n), got {x.data.shape} (node {x.node_id})"
        )
    views = [x.data[:, :, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)]
    m = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    out = _node(m, (x,), "maxpool2")

    def _back():
        gx = np.zeros_like(x.data)
        taken = np.zeros(m.shape, dtype=bool)
        for v, (dy, dx) in zip(views, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (v == m) & ~taken
            taken |= hit
            gx[:, :, dy::2, dx::2] = out.grad * hit
        _acc(x, gx)

    out._backward = _back
    return out


def topo_order(root):
    """Topological order of the DAG below `root` (inputs before consumers)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed=None):
    """Reverse accumulation from `root`; fills .grad on every traversed node.

    Gradients of the traversed graph are reset first, so each call yields
    fresh gradients (no cross-step accumulation).
    """
    if seed is None:
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.data.shape:
            raise ShapeError(
                f"backward: seed shape {seed.shape} != output shape {root.data.shape}"
            )
    order = topo_order(root)
    for t in order:
        t.grad = None
    root.grad = seed.copy()
    for t in reversed(order):
        if t._backward is not None:
            t._backward()
    for t in order:
        if t.grad is None:  # zero contribution (e.g. fully clamped branch)
            t.grad = np.zeros_like(t.data)


def zero_grads(params):
    for p in params:
        p.grad = None


def gradient_check(fn, params, eps=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    fn: nullary callable rebuilding the graph from current param values and
    returning a scalar Tensor. Error metric per entry:
    |autodiff - central| / max(1, |central|).
    """
    if eps <= 0:
        raise ValueError("gradient_check: eps must be > 0")
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"gradient_check: output must be scalar, got {out.data.shape}")
    backward(out)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        adf = ad.reshape(-1)
        for i in range(flat.size):
            v = flat[i]
            flat[i] = v + eps
            f_plus = float(fn().data)
            flat[i] = v - eps
            f_minus = float(fn().data)
            flat[i] = v
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(adf[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst


class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError(f"Adam: decay rates must lie in (0,1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        """Apply one update. grads defaults to each param's .grad (None -> 0)."""
        if grads is None:
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in self.params
            ]
        if len(grads) != len(self.params):
            raise ShapeError("Adam.step: grads/params length mismatch")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.data.shape:
                raise ShapeError(
                    f"Adam.step: grad shape {np.shape(g)} != param shape {p.data.shape}"
                )
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * np.asarray(g)
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
