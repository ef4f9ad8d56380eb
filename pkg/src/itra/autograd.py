"""Dense float64 tensors with reverse-mode automatic differentiation.

Every public operation returns a new :class:`Tensor`; inputs are never
modified. A tensor created from an operation whose inputs require gradients
records its parents and a local backward rule, so :func:`backward` can walk
the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "tensor", "backward", "finite_diff",
    "add", "sub", "mul", "div", "neg", "scale", "relu", "exp", "log", "sqrt",
    "square", "clamp_min", "tsum", "mean", "matmul", "reshape", "transpose",
    "take_rows", "pick", "logsumexp", "conv2d", "maxpool2d", "elementwise",
]


class Tensor:
    """A float64 array that may take part in a differentiable graph."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _result(cls, data, parents, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
            out.requires_grad = True
        else:
            out.parents = ()
            out.backward_fn = None
            out.requires_grad = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=np.float64), (), None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # relu'(0) = 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero wherever the floor is active."""
    a = _as_tensor(a)
    mask = a.data > floor
    return Tensor._result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp,
    "neg": neg, "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._result(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


# ---------------------------------------------------------------- shape/linear

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def take_rows(a, idx) -> Tensor:
    """Rows ``a[idx]``; repeated indices accumulate in the backward pass."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(a.data[idx], (a,), bw)


def pick(a, cols) -> Tensor:
    """Per-row entry ``a[i, cols[i]]`` of a matrix."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    if cols.shape != (a.shape[0],):
        raise DimensionError(f"need one column index per row, got {cols.shape} for {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        return (full,)

    return Tensor._result(a.data[rows, cols], (a,), bw)


# ---------------------------------------------------------------- convolution

def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,k,k]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d expects x[N,C,H,W] and w[F,C,k,k], got {x.shape}, {w.shape}")
    n, c, hgt, wid = x.shape
    f, cw, k, _ = w.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if hgt + 2 * padding < k or wid + 2 * padding < k:
        raise DimensionError(f"conv2d window {k}x{k} larger than input {x.shape} (padding={padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise DimensionError(f"conv2d bias must have shape ({f},), got {b.shape}")
        out = out + b.data
        parents.append(b)
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gflat.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, padding:padding + hgt, padding:padding + wid] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gflat.sum(axis=0))
        return tuple(grads)

    return Tensor._result(np.ascontiguousarray(out), tuple(parents), bw)


def maxpool2d(x, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; ties route the gradient to the first index in row-major order."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects x[N,C,H,W], got {x.shape}")
    n, c, hgt, wid = x.shape
    if hgt < k or wid < k:
        raise DimensionError(f"maxpool2d window {k}x{k} larger than input {x.shape}")
    win = _windows(x.data, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                sel = np.where(arg == i * k + j, g, 0.0)
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel
        return (gx,)

    return Tensor._result(out, (x,), bw)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a mapping from every graph node that requires a gradient to its
    gradient array. Leaf tensors additionally get ``.grad`` set (overwritten,
    not accumulated, so repeated calls give identical results).
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        result[node] = g
        if not node.parents:
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return result


def finite_diff(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def value(v):
        out = f(v)
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(x.copy())
        flat[i] = orig - h
        down = value(x.copy())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
