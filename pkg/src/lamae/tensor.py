"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is active and
at least one input requires a gradient, the result keeps references to its
inputs plus a closure mapping the output gradient to input gradients. Calling
:func:`backward` (or :func:`grad`) walks that graph in reverse topological
order.

Only the handful of ops needed by the LAMAE network are provided. Broadcasting
follows numpy rules; gradients are summed back to the input shape.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_RECORDING = contextvars.ContextVar("lamae_grad_recording", default=True)



class EmptyAttentionSupport(ValueError):
    """Raised when a query has no unmasked key to attend to."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def is_recording() -> bool:
    return _RECORDING.get()


@contextlib.contextmanager
def no_grad():
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


def _make(data, parents: Sequence[Tensor], backward_fn, op) -> Tensor:
    if _RECORDING.get() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (np.sign(xd) * g,), "abs")


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    y, dy = _kernels.gelu_forward(np.ascontiguousarray(x.data))
    return _make(y, (x,), lambda g: (g * dy,), "gelu")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)
    return _make(x.data[index], (x,), backward, "getitem")


def take(x, indices, axis=0, unique=False) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass.

    ``unique=True`` promises distinct indices and allows a plain scatter.
    """
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    if axis != 0 and idx.ndim != 1:
        raise ValueError("take along a non-leading axis needs 1-d indices")

    def backward(g):
        out = np.zeros(shape)
        if axis == 0 and unique:
            out[idx] = g
        elif axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def scatter_rows(src, indices, n_rows) -> Tensor:
    """Place rows of ``src`` at unique row ``indices`` of a zero matrix of ``n_rows`` rows."""
    src = as_tensor(src)
    idx = np.asarray(indices, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows requires unique indices")
    out = np.zeros((n_rows,) + src.shape[1:])
    out[idx] = src.data
    return _make(out, (src,), lambda g: (g[idx],), "scatter_rows")


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, old),), "broadcast")


# ---------------------------------------------------------------------------
# reductions and linear algebra


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n, k) and ``b`` of shape (k, m) or (..., k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, w = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [(g2 @ wd.T).reshape(xd.shape), flat.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalization and attention


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match last extent {d}")
    shape = x.shape
    gd = gamma.data
    y, xhat, inv = _kernels.layer_norm_forward(np.ascontiguousarray(x.data).reshape(-1, d), gd, beta.data, eps)

    def backward(g):
        dx, dgamma, dbeta = _kernels.layer_norm_backward(np.ascontiguousarray(g).reshape(-1, d), xhat, inv, gd)
        return dx.reshape(shape), dgamma, dbeta

    return _make(y.reshape(shape), (x, gamma, beta), backward, "layer_norm")


def _attn_forward(qd, kd, vd, key_mask=None):
    scale = 1.0 / np.sqrt(qd.shape[-1])
    s = qd @ np.swapaxes(kd, -1, -2)
    s *= scale
    if key_mask is not None:
        s = np.where(key_mask, s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ vd, p, scale


def _attn_backward(g, p, qd, kd, vd, scale):
    gv = np.swapaxes(p, -1, -2) @ g
    gs = g @ np.swapaxes(vd, -1, -2)
    _kernels.softmax_backward_rows(gs.reshape(-1, gs.shape[-1]), p.reshape(-1, p.shape[-1]), scale)
    return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv


def attention(q, k, v, key_mask=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``key_mask`` is a boolean array broadcastable to (..., n_keys); ``True``
    marks keys that may be attended to.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key feature extents differ")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values disagree on count")
    qd, kd, vd = q.data, k.data, v.data
    km = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape[-1] != kd.shape[-2]:
            raise ValueError("key_mask length must equal number of keys")
        km = km[..., None, :]
        if not np.all(km.any(axis=-1)):
            raise EmptyAttentionSupport("empty attention support")
    out, p, scale = _attn_forward(qd, kd, vd, km)

    def backward(g):
        gq, gk, gv = _attn_backward(g, p, qd, kd, vd, scale)
        return _unbroadcast(gq, qd.shape), _unbroadcast(gk, kd.shape), _unbroadcast(gv, vd.shape)

    return _make(out, (q, k, v), backward, "attention")


def multi_head_self_attention(qkv, n_heads: int) -> Tensor:
    """Attention of packed projections (B, n, 3d) split into ``n_heads`` heads.

    Returns the concatenated head outputs, (B, n, d), before the output
    projection.
    """
    qkv = as_tensor(qkv)
    B, n, d3 = qkv.shape
    d = d3 // 3
    dh = d // n_heads
    split = np.transpose(qkv.data.reshape(B, n, 3, n_heads, dh), (2, 0, 3, 1, 4))
    qd, kd, vd = split[0], split[1], split[2]
    out, p, scale = _attn_forward(qd, kd, vd)

    def backward(g):
        g = np.transpose(g.reshape(B, n, n_heads, dh), (0, 2, 1, 3))
        grads = np.stack(_attn_backward(g, p, qd, kd, vd, scale))
        return (np.transpose(grads, (1, 3, 0, 2, 4)).reshape(B, n, d3),)

    merged = np.transpose(out, (0, 2, 1, 3)).reshape(B, n, d)
    return _make(merged, (qkv,), backward, "mhsa")


def bce_with_logits(logits, targets) -> Tensor:
    """Summed binary cross-entropy, stable for large logits."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * z)) - y),)

    return _make(loss.sum(), (logits,), backward, "bce")


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from an output, inputs before consumers."""

    nodes: list

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf]


def backward(output: Tensor) -> Graph:
    """Populate ``.grad`` on every node feeding ``output`` (a scalar)."""
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    graph = Graph.from_output(output)
    for node in graph.nodes:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(graph.nodes):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        if not node.is_leaf:
            node.grad = None
    return graph


def grad(f, params: Sequence[Tensor]) -> list:
    """Gradients of the scalar ``f`` with respect to each leaf in ``params``.

    ``f`` is either an already evaluated scalar tensor or a zero-argument
    callable producing one. Parameters that do not influence ``f`` receive
    zero gradients.
    """
    for p in params:
        p.grad = None
    out = f() if callable(f) else f
    if not isinstance(out, Tensor):
        raise TypeError("f must evaluate to a Tensor")
    if out.data.size != 1:
        raise ValueError(f"grad needs a scalar-valued f, got shape {out.shape}")
    backward(out)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def finite_diff_grad(f: Callable, params: Sequence[Tensor], eps: float = 1e-5) -> list:
    """Central-difference gradient estimate, one coordinate at a time."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")

    def value():
        with no_grad():
            out = f()
        return float(out.data) if isinstance(out, Tensor) else float(out)

    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def max_relative_error(analytic: Iterable[np.ndarray], numeric: Iterable[np.ndarray], floor=1e-8) -> float:
    """Largest per-tensor ``||a - n|| / max(||a||, ||n||)`` (Euclidean norms).

    Tensors whose gradients are both below ``floor`` in norm count as exact.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        if denom <= floor:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst