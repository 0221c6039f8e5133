"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a :class:`Tensor` whose ``_node``
records its inputs, a backward rule and a global sequence number.  Calling
:func:`backward` on a scalar collects the reachable nodes and visits them in
exact reverse recording order.  A graph can be consumed only once; a second
``backward`` through the same nodes, or into leaves whose ``grad`` has not
been reset, raises :class:`~moa.errors.ContractError`.

Storage is always a C-ordered numpy array.  ``float64`` is the default and is
what the gradient checks use; ``float32`` is fine for training.
"""

from __future__ import annotations

import itertools
import os
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

DEBUG = os.environ.get("MOA_DEBUG", "") not in ("", "0")

_seq = itertools.count()
_grad_enabled = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation."""

    __slots__ = ("inputs", "backward_fn", "seq", "grad", "consumed", "op")

    def __init__(self, inputs: Tuple["Tensor", ...], backward_fn: Callable, op: str):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.grad: Optional[np.ndarray] = None
        self.consumed = False
        self.op = op

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, seq={self.seq}, consumed={self.consumed})"


class Tensor:
    """An N-dimensional float array that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ---------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


# -- graph recording --------------------------------------------------------

def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check(data: np.ndarray, op: str) -> None:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _record(data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(inputs, backward_fn, op)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable") from None


# -- elementwise ------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum with trailing-dimension broadcasting."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw, "add")


broadcast_add = add


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)
    return _record(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _record(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(xd * cdf, (x,), bw, "gelu")


# -- linear algebra ---------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), bw, "matmul")


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}") from None
    src = x.shape
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last one by default)."""
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros(src_shape, dtype=dtype)
        if basic:
            gx[index] = g  # basic indexing never selects a site twice
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record(np.array(out, copy=True), (x,), bw, "getitem")


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` at integer ``indices``."""
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    n = x.shape[ax]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise DimensionError(f"take: index out of range for axis {ax} of size {n}")
    src_shape, dtype = x.shape, x.dtype
    lead = (slice(None),) * ax

    def bw(g):
        gx = np.zeros(src_shape, dtype=dtype)
        np.add.at(gx, lead + (indices,), g)
        return (gx,)

    return _record(np.take(x.data, indices, axis=ax), (x,), bw, "take")


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    return take(x, indices, axis=0)


def pad(x: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero-pad each axis by ``(before, after)``."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise DimensionError(f"pad widths {widths} do not match rank of {x.shape}")
    if all(w == (0, 0) for w in widths):
        return x
    idx = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _record(np.pad(x.data, widths), (x,), lambda g: (np.ascontiguousarray(g[idx]),), "pad")


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    src = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return _record(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), bw, "mean")


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    return mean(x, axis=axis)


# -- fused normalisers ------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply ``gamma``/``beta``."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = gxh = None
        if x.requires_grad:
            gxh = g * gd
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _record(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


# -- backward ---------------------------------------------------------------

class Graph:
    """The recorded operations reachable from one output, in recording order."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        if out._node is None:
            return cls([])
        seen = {id(out._node): out._node}
        stack = [out._node]
        while stack:
            node = stack.pop()
            for t in node.inputs:
                n = t._node
                if n is not None and id(n) not in seen:
                    seen[id(n)] = n
                    stack.append(n)
        return cls(list(seen.values()))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Raises
    ------
    ContractError
        If ``loss`` is not a scalar, if the graph was already consumed by an
        earlier call, or if a leaf still holds a gradient from a previous pass.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        if loss.grad is not None:
            raise ContractError("leaf already has a gradient; reset it before backward")
        loss.grad = seed
        return

    graph = Graph.from_output(loss)
    leaves = {}
    for node in graph:
        if node.consumed:
            raise ContractError(f"graph already consumed (node {node.op!r} #{node.seq})")
        for t in node.inputs:
            if t._node is None and t.requires_grad:
                if t.grad is not None:
                    raise ContractError(
                        f"leaf {t.name or t.shape} already has a gradient; reset it before backward"
                    )
                leaves[id(t)] = t

    acc = {}
    loss._node.grad = seed
    for node in reversed(graph.nodes):
        g = node.grad
        node.grad = None
        if g is not None:
            grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None:
                    t._node.grad = gi if t._node.grad is None else t._node.grad + gi
                else:
                    k = id(t)
                    acc[k] = gi if k not in acc else acc[k] + gi
        node.consumed = True
        node.backward_fn = None
        node.inputs = ()

    for k, t in leaves.items():
        g = acc.get(k)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
