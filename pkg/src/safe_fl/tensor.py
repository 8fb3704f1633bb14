"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the graph once in reverse
topological order and then releases it.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph."""


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = _check(arr, name or "Tensor")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


GradientMap = dict  # parameter name -> ndarray of the parameter's shape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check(data, op)
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard``, gradient routed to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through: shape {hard.shape} != {soft.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def stack(rows: Sequence[Tensor], axis: int = 0) -> Tensor:
    rows = [as_tensor(r) for r in rows]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(rows)))

    return _make(np.stack([r.data for r in rows], axis=axis), rows, bw, "stack")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate N×Cᵢ×H×W tensors along the channel axis."""
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: mismatched shapes {ref} and {x.shape}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([x.data for x in xs], axis=1), xs, bw, "concat_channels")


def take_rows(x: Tensor, cols: np.ndarray) -> Tensor:
    """Pick ``x[i, cols[i]]`` for each row i of a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    idx = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros(x.shape)
        out[idx, cols] = g
        return (out,)

    return _make(x.data[idx, cols], (x,), bw, "take_rows")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weightᵀ + bias`` for weight of shape out×in."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def _correlate(xp: np.ndarray, k: np.ndarray, stride: int, ho: int, wo: int):
    """Valid cross-correlation of a pre-padded input; returns output and its im2col matrix."""
    n, c = xp.shape[:2]
    o, _, kh, kw = k.shape
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    if kh == kw == 1 and stride == 1:
        cols = xt.reshape(n * ho * wo, c)
    else:
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        cols = np.empty((n, ho, wo, kh, kw, c))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xt[:, i:i + hs:stride, j:j + ws:stride, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
    kmat = k.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return out, cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N×C×H×W input with an O×C×kh×kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    # floor convention: trailing rows/columns that do not fill a window are dropped
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    k = kernel.data
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out, cols = _correlate(xp, k, stride, ho, wo)

    def bw(g):
        gx = gk = None
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            if stride > 1:
                gd = np.zeros((n, o, stride * (ho - 1) + 1, stride * (wo - 1) + 1))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            full = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp, _ = _correlate(full, flipped, 1, gd.shape[2] + kh - 1, gd.shape[3] + kw - 1)
            gx = np.zeros((n, c, hp, wp))
            gx[:, :, :gxp.shape[2], :gxp.shape[3]] = gxp
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("group_norm: affine parameters must have one entry per channel")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                        - xh * (gxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "group_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


# ---------------------------------------------------------------- probabilities

def softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (z,), bw, "softmax")


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (z,), bw, "log_softmax")


def _check_labels(labels, n: int, j: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= j):
        raise IndexError(f"label out of range [0, {j})")
    return labels


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log(probs[i, labels[i]])``."""
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    return scale(sum_all(log(take_rows(probs, labels))), -1.0 / probs.shape[0])


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return scale(sum_all(take_rows(log_softmax(logits), labels)), -1.0 / logits.shape[0])


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode accumulation from a scalar loss.

    Sets ``.grad`` on every tracked leaf and returns a map from leaf name to
    gradient. The graph is released afterwards; a second call on the same
    loss raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every tracked parameter")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.zeros_like(node.data) if g is None else g
                leaves.append(node)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check(pg, f"backward of {node._op}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            # intermediate results must not masquerade as leaves in a later graph
            node.requires_grad = False
            node._consumed = True
        node._parents = ()
        node._backward = None
    out: GradientMap = {}
    for leaf in leaves:
        key = leaf.name if leaf.name is not None else f"tensor_{id(leaf)}"
        if key in out:
            raise GraphError(f"duplicate parameter name {key!r}")
        out[key] = leaf.grad
    return out
