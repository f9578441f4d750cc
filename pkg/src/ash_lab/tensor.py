"""Dense float64 tensors with reverse-mode differentiation.

Only the operations used by the stylization / segmentation pipeline are
provided. Every op records a node in the compute graph when at least one
input requires a gradient; ``Tensor.backward`` walks that graph once in
reverse topological order.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""

    def __init__(self, op: str, axis: str, got, expected=None):
        msg = f"{op}: bad extent on axis '{axis}' (got {got}"
        if expected is not None:
            msg += f", expected {expected}"
        super().__init__(msg + ")")
        self.op = op
        self.axis = axis


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep graphs would overflow the recursion limit
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
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        ra, rb = a.shape[::-1], b.shape[::-1]
        for i, (x, y) in enumerate(zip(ra, rb)):
            if x != y and 1 not in (x, y):
                raise DimensionError(op, str(max(a.ndim, b.ndim) - 1 - i), a.shape, b.shape) from None
        raise


# -- elementwise arithmetic ----------------------------------------------

def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast("add", x.data, y.data)

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make(x.data + y.data, (x, y), bw, "add")


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast("sub", x.data, y.data)

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _make(x.data - y.data, (x, y), bw, "sub")


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast("mul", x.data, y.data)

    def bw(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return _make(x.data * y.data, (x, y), bw, "mul")


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast("div", x.data, y.data)
    out = x.data / y.data

    def bw(g):
        gx = _unbroadcast(g / y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(-g * out / y.data, y.shape) if y.requires_grad else None
        return gx, gy

    return _make(out, (x, y), bw, "div")


def power(x: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return _make(x.data**p, (x,), bw, "pow")


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), bw, "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), bw, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bw, "log")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)

    def bw(g):
        return (g * sgn,)

    return _make(np.abs(x.data), (x,), bw, "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    mask = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * mask,)

    return _make(np.clip(x.data, lo, hi), (x,), bw, "clip")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)

    def bw(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), bw, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw, "sigmoid")


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


# -- reductions / shape ---------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    for i, x in enumerate(xs[1:], 1):
        if x.ndim != xs[0].ndim:
            raise DimensionError("concat", "rank", x.ndim, xs[0].ndim)
        for a in range(x.ndim):
            if a != axis and x.shape[a] != xs[0].shape[a]:
                raise DimensionError("concat", str(a), x.shape[a], xs[0].shape[a])
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def take_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[index[h, w], h, w]`` for a C×H×W tensor and an H×W index map."""
    index = np.asarray(index)
    if index.shape != x.shape[1:]:
        raise DimensionError("take_channels", "spatial", index.shape, x.shape[1:])
    idx = index[None].astype(np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g[None], axis=0)
        return (out,)

    return _make(np.take_along_axis(x.data, idx, axis=0)[0], (x,), bw, "take_channels")


# -- spatial ops ----------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError("conv2d", axis, n, f"(n + 2*{pad} - {k}) divisible by {stride}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a C_in×H×W input."""
    if x.ndim != 3:
        raise DimensionError("conv2d", "rank", x.ndim, 3)
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("conv2d", "kernel_width", k2, k)
    if x.shape[0] != cin:
        raise DimensionError("conv2d", "channel", x.shape[0], cin)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv2d", "bias", bias.shape, (cout,))
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    _, h, w = x.shape
    ho = _out_extent(h, k, stride, pad, "height")
    wo = _out_extent(w, k, stride, pad, "width")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((cin, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(cin * k * k, ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, ho, wo)

    def bw(g):
        g2 = g.reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    c, h, w = x.shape

    def bw(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return _make(out, (x,), bw, "nearest_upsample")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    c, h, w = x.shape
    if h % factor:
        raise DimensionError("avg_pool", "height", h, f"multiple of {factor}")
    if w % factor:
        raise DimensionError("avg_pool", "width", w, f"multiple of {factor}")
    ho, wo = h // factor, w // factor
    inv = 1.0 / (factor * factor)

    def bw(g):
        return (np.repeat(np.repeat(g * inv, factor, axis=1), factor, axis=2),)

    out = x.data.reshape(c, ho, factor, wo, factor).mean(axis=(2, 4))
    return _make(out, (x,), bw, "avg_pool")


def matmul_channels(q: Tensor, f: Tensor) -> Tensor:
    """Multiply every spatial site's channel vector by the C×C matrix ``q``."""
    q, f = as_tensor(q), as_tensor(f)
    c = f.shape[0]
    if q.shape != (c, c):
        raise DimensionError("matmul_channels", "channel", q.shape, (c, c))
    flat = f.data.reshape(c, -1)

    def bw(g):
        g2 = g.reshape(c, -1)
        gq = g2 @ flat.T if q.requires_grad else None
        gf = (q.data.T @ g2).reshape(f.shape) if f.requires_grad else None
        return gq, gf

    return _make((q.data @ flat).reshape(f.shape), (q, f), bw, "matmul_channels")


# -- verification ---------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    h: float = 1e-6,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``coords`` restricts the comparison to a subset of flat indices, which
    keeps checks on large parameter tensors affordable.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    loss = f(x)
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    loss.backward()
    analytic = np.zeros(base.size) if x.grad is None else x.grad.reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sgn * h
            with no_grad():
                v = f(Tensor(probe.reshape(base.shape))).item()
            if not np.isfinite(v):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            vals.append(v)
        num = (vals[0] - vals[1]) / (2 * h)
        a = analytic[i]
        if not np.isfinite(a):
            raise FloatingPointError(f"non-finite analytic gradient at coordinate {i}")
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
