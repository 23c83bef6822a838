"""Reverse-mode differentiable tensor on top of float64 numpy arrays.

Every operator returns a new ``Tensor`` that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward`` walks
the resulting DAG in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operator inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # arithmetic sugar
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

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), "square", lambda g: (2.0 * x.data * g,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), "relu", lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), "exp", lambda g: (g * e,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; entries below ``floor`` are clamped and get zero gradient."""
    d = x.data
    if floor > 0:
        live = d >= floor
        d = np.where(live, d, floor)
        return _make(np.log(d), (x,), "log", lambda g: (np.where(live, g / d, 0.0),))
    return _make(np.log(d), (x,), "log", lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    safe = np.where(r > 0, r, np.inf)
    return _make(r, (x,), "sqrt", lambda g: (g * 0.5 / safe,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    live = x.data >= lo
    return _make(np.where(live, x.data, lo), (x,), "clamp_min", lambda g: (g * live,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None (eval mode)."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape

def tsum(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), "sum",
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), "mean",
                 lambda g: (np.full(x.shape, float(g) / n),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), "sum_axis", back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _make(out, xs, "concat", back)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), "take_rows", back)


def pick(x: Tensor, labels: np.ndarray, axis: int = 1) -> Tensor:
    """Select ``x[..., labels, ...]`` along ``axis``; labels broadcast over the other axes.

    For ``x`` of shape (B, K) and labels (B,) returns (B,). For (B, K, H, W)
    and labels (B, H, W) returns (B, H, W).
    """
    labels = np.asarray(labels, dtype=np.intp)
    idx = np.expand_dims(labels, axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), "pick", back)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``weights @ x + bias`` for x of shape (n,) or a batch (B, n)."""
    n_out, n_in = weights.shape
    if x.shape[-1] != n_in or bias.shape != (n_out,) or x.ndim not in (1, 2):
        raise ShapeError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} disagree")
    x2 = x.data.reshape(-1, n_in)
    out = x2 @ weights.data.T + bias.data

    def back(g):
        g2 = g.reshape(-1, n_out)
        return (
            (g2 @ weights.data).reshape(x.shape),
            g2.T @ x2,
            g2.sum(axis=0),
        )

    return _make(out.reshape(x.shape[:-1] + (n_out,)), (x, weights, bias), "dense", back)


def sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows, shape (n1, n2)."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"sq_dists: row dimensions differ {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    out = (xd * xd).sum(axis=1)[:, None] + (yd * yd).sum(axis=1)[None, :] - 2.0 * (xd @ yd.T)

    def back(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * xd - g @ yd)
        gy = 2.0 * (g.sum(axis=0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return _make(out, (x, y), "sq_dists", back)


# ---------------------------------------------------------------- image operators

def _batched(x: np.ndarray, expect: int = 4) -> tuple[np.ndarray, bool]:
    if x.ndim == expect - 1:
        return x[None], True
    if x.ndim != expect:
        raise ShapeError(f"expected a {expect - 1}-d image or {expect}-d batch, got {x.shape}")
    return x, False


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernels`` is (C_out, C_in, k, k).
    """
    xb, squeeze = _batched(x.data)
    c_out, c_in, k, k2 = kernels.shape
    n, c, h, w = xb.shape
    if c != c_in or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, kernels {kernels.shape}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h}x{w} (pad {padding})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {c_out} output channels")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    xp = xp.transpose(1, 0, 2, 3)  # channel-major keeps every window slice contiguous per channel
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    kmat = kernels.data.reshape(c_out, c * k * k)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if squeeze:
        out = out[0]

    def back(g):
        gt = (g[None] if squeeze else g).transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        gk = (gt @ cols.T).reshape(kernels.shape)
        gcols = (kmat.T @ gt).reshape(c, k, k, n, ho, wo)
        gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        grads = [np.ascontiguousarray(gx[0] if squeeze else gx), gk]
        if bias is not None:
            grads.append(gt.sum(axis=1))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(np.ascontiguousarray(out), parents, "conv2d", back)


def maxpool2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling; gradient goes to the first max in row-major order."""
    xb, squeeze = _batched(x.data)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} must be even")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def back(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], (g[None] if squeeze else g)[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h, w)
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), "maxpool2", back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def back(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _make(out, (x,), "upsample2", back)


# ---------------------------------------------------------------- softmax family

def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _make(out, (x,), "logsumexp", back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), "softmax", back)


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def graph_ops(root: Tensor) -> list[str]:
    """Operator kinds on the differentiable path to ``root``, inputs first."""
    return [n.op for n in _topo(root) if not n.is_leaf]


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
