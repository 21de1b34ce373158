"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to one gradient per parent. ``backward`` walks the recorded
tape in reverse topological order and accumulates gradients by summation.

Subgradients at kinks (``abs`` and ``min_const`` at the kink, ``relu`` at 0)
are defined as 0.
"""

from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "elementwise",
    "matmul",
    "reduce",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv1d",
    "embedding",
    "concat",
    "where",
    "dropout",
    "topological_order",
    "backward",
    "write_tensor",
    "read_tensor",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return arr


class Tensor:
    """N-dimensional real array that can record operations for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{rg})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", tensor(other, like=self), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", tensor(other, like=self), self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis, keepdims=keepdims)

    def std(self, axis=None, keepdims: bool = False, ddof: int = 0):
        return reduce("std", self, axis, keepdims=keepdims, ddof=ddof)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    def abs(self):
        return elementwise("abs", self)

    def square(self):
        return elementwise("square", self)

    def relu(self):
        return elementwise("relu", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)


def tensor(value, like: Tensor | None = None, requires_grad: bool = False) -> Tensor:
    """Wrap ``value`` as a Tensor, matching ``like``'s dtype for bare scalars/arrays."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


_UNARY = {"neg", "relu", "abs", "square", "exp", "log", "tanh", "leaky_relu", "min_const", "sqrt"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None, *, const: float = 0.0, slope: float = 0.2) -> Tensor:
    """Apply an elementwise operation.

    Binary ops (``add``, ``sub``, ``mul``, ``div``) broadcast over trailing
    dimensions. ``min_const`` computes ``min(a, const)`` and also accepts the
    constant as ``b`` for convenience.
    """
    if not isinstance(a, Tensor):
        a = tensor(a, like=b if isinstance(b, Tensor) else None)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} requires two operands")
        if not isinstance(b, Tensor):
            b = tensor(b, like=a)
        shape = _broadcast_shape(a, b)
        ad, bd = a.data, b.data
        if op == "add":
            data = ad + bd

            def bw(g):
                return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

        elif op == "sub":
            data = ad - bd

            def bw(g):
                return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)

        elif op == "mul":
            data = ad * bd

            def bw(g):
                ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
                gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
                return ga, gb

        else:
            data = ad / bd

            def bw(g):
                ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
                gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
                return ga, gb

        assert data.shape == shape
        return _make(data, (a, b), bw, op)

    if op not in _UNARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    x = a.data
    if op == "neg":
        data = -x

        def bw(g):
            return (-g,)

    elif op == "relu":
        pos = x > 0
        data = np.where(pos, x, 0).astype(x.dtype)

        def bw(g):
            return (g * pos,)

    elif op == "leaky_relu":
        pos = x > 0
        data = np.where(pos, x, slope * x).astype(x.dtype)

        def bw(g):
            return (np.where(pos, g, slope * g),)

    elif op == "abs":
        data = np.abs(x)

        def bw(g):
            return (g * np.sign(x),)

    elif op == "square":
        data = x * x

        def bw(g):
            return (2 * x * g,)

    elif op == "min_const":
        c = const if b is None else float(b.item() if isinstance(b, Tensor) else b)
        below = x < c
        data = np.where(below, x, c).astype(x.dtype)

        def bw(g):
            return (g * below,)

    elif op == "exp":
        data = np.exp(x)

        def bw(g):
            return (g * data,)

    elif op == "log":
        data = np.log(x)

        def bw(g):
            return (g / x,)

    elif op == "sqrt":
        data = np.sqrt(x)

        def bw(g):
            return (g * 0.5 / data,)

    else:  # tanh
        data = np.tanh(x)

        def bw(g):
            return (g * (1 - data * data),)

    return _make(data, (a,), bw, op)


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return elementwise("leaky_relu", x, slope=slope)


def min_const(x: Tensor, c: float = 0.0) -> Tensor:
    return elementwise("min_const", x, const=c)


def tanh(x: Tensor) -> Tensor:
    return elementwise("tanh", x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    if not isinstance(b, Tensor):
        b = tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: one flat product instead of a batched one
        a2 = ad.reshape(-1, ad.shape[-1])
        data = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(data, (a, b), bw, "matmul")
    data = ad @ bd

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw, "matmul")


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False, ddof: int = 0) -> Tensor:
    """Reduce by ``sum``, ``mean`` or ``std`` (population std unless ``ddof`` > 0)."""
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"empty reduction over axes {axes} of shape {a.shape}")
    x = a.data

    def expand(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return g

    if op == "sum":
        data = x.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(expand(g), x.shape),)

    elif op == "mean":
        data = x.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(expand(g) / count, x.shape),)

    elif op == "std":
        if count - ddof <= 0:
            raise ShapeError(f"std needs more than {ddof} elements, got {count}")
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        sd = np.sqrt((centered * centered).sum(axis=axes, keepdims=True) / (count - ddof))
        data = sd if keepdims else np.squeeze(sd, axis=axes)

        def bw(g):
            safe = np.where(sd > 0, sd, 1.0)
            scale = np.where(sd > 0, expand(g) / (safe * (count - ddof)), 0.0)
            return ((centered * scale).astype(x.dtype),)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(data, dtype=x.dtype), (a,), bw, op)


def _reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(src),), "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _make(data, (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    data = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(data, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(data, tuple(tensors), bw, "concat")


def where(mask: np.ndarray, a: Tensor, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    if not isinstance(b, Tensor):
        b = tensor(b, like=a)
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, a.data, b.data).astype(a.dtype)

    def bw(g):
        ga = _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw, "where")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; NaN inputs propagate NaN."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(data.astype(xd.dtype), (x, gamma, beta), bw, "layer_norm")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 1-D convolution over the time axis.

    ``x`` is ``[..., T, C_in]`` and ``weight`` is ``[K, C_in, C_out]`` with odd
    ``K``. Output length is ``ceil(T / stride)``.
    """
    k, c_in, c_out = weight.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {x.shape[-1]}, weight expects {c_in}")
    xd = x.data
    lead = xd.shape[:-2]
    t = xd.shape[-2]
    pad = k // 2
    t_out = -(-t // stride)
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xd, widths)
    # windows: [..., T_out, C_in, K] -> [..., T_out, K, C_in]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)[..., ::stride, :, :]
    win = win[..., :t_out, :, :]
    cols = np.ascontiguousarray(np.swapaxes(win, -1, -2)).reshape(lead + (t_out, k * c_in))
    w2 = weight.data.reshape(k * c_in, c_out)
    data = cols @ w2
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(weight.shape)
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(lead + (t_out, k, c_in))
            gxp = np.zeros_like(xp)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[..., j : j + span : stride, :] += gcols[..., :, j, :]
            gx = gxp[..., pad : pad + t, :]
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, c_out).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(data.astype(xd.dtype), parents, bw, "conv1d")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(data, (table,), bw, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` at train time."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return x * Tensor(keep)


def topological_order(root: Tensor) -> list[Tensor]:
    """Return the tape reachable from ``root`` with every node after its inputs."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every requires_grad ancestor."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            g = np.asarray(g, dtype=node.dtype)
            # never mutated in place, so sharing the buffer is safe
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- serialization ----------------------------------------------------------

MAGIC = b"M2T1"


def write_tensor(fh: BinaryIO, value) -> None:
    """Write ``value`` as ``M2T1 | rank u32 | extents u32... | itemsize u32 | raw LE values``."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    arr = np.asarray(arr, order="C")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<I", arr.dtype.itemsize))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    (itemsize,) = struct.unpack("<I", fh.read(4))
    dtype = {4: "<f4", 8: "<f8"}.get(itemsize)
    if dtype is None:
        raise ValueError(f"unsupported item size {itemsize}")
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * itemsize)
    if len(raw) != count * itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dtype).astype(np.dtype(dtype).newbyteorder("=")).reshape(shape)
