"""Dense tensors with reverse-mode automatic differentiation.

Buffers are numpy arrays in C order. Every operation records its parents and a
closure mapping the output gradient to parent gradients; ``backward`` replays
those closures in a fixed reverse-topological order, so repeated evaluation of
the same graph is bit-identical.

Broadcasting is restricted to leading-axis expansion: a binary operand may have
a shape equal to a trailing suffix of the other operand's shape (or be a
scalar). Anything else needs an explicit ``expand``/``reshape``.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

PRECISIONS = {"float64": np.float64, "float32": np.float32}

_grad_enabled = contextvars.ContextVar("ria_grad_enabled", default=True)
_ids = itertools.count()


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference paths)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True, order="C")
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    # -- basic accessors -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def flat(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}", "tensor-core")
        return self.data.reshape(-1)[0].item()

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out._id = next(_ids)
    needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting helpers ---------------------------------------------------

def _suffix(short: tuple, long: tuple) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short):]) == tuple(short)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _suffix(a.shape, b.shape) or _suffix(b.shape, a.shape):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only leading-axis expansion)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)

    return _make(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary ------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    xd = x.data
    return _make(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),), "silu")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0) or np.any(np.isnan(xd)):
        bad = xd[(xd <= 0) | np.isnan(xd)].reshape(-1)[0]
        raise DomainError(f"log of non-positive value {bad!r}")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def back(g):
        if axes is None:
            return (np.broadcast_to(np.reshape(g, (1,) * len(shape)) if not keepdims else g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has the same
    leading axes as ``a``.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            k, c = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, c)
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


# -- structural -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    order = list(range(x.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return transpose(x, order)


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``size`` times along it."""
    ax = axis % (x.ndim + 1)
    out = np.ascontiguousarray(np.broadcast_to(np.expand_dims(x.data, ax),
                                               x.shape[:ax] + (size,) + x.shape[ax:]))
    return _make(out, (x,), lambda g: (g.sum(axis=ax),), "expand")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no inputs")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(x: Tensor, sizes: Sequence[int] | int, axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into pieces of the given widths (or n equal pieces)."""
    ax = axis % x.ndim
    width = x.shape[ax]
    if isinstance(sizes, int):
        if width % sizes:
            raise DimensionError(f"split: axis of width {width} not divisible into {sizes}")
        sizes = [width // sizes] * sizes
    if sum(sizes) != width:
        raise DimensionError(f"split: widths {list(sizes)} do not sum to {width}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + size)
        sl = tuple(sl)

        def back(g, sl=sl):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        outs.append(_make(np.ascontiguousarray(x.data[sl]), (x,), back, "split"))
        start += size
    return outs


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """table[idx] for integer ``idx`` of any shape (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        _raise_index(idx, n)

    def back(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return _make(table.data[idx], (table,), back, "take_rows")


def _raise_index(idx, n):
    bad = idx[(idx < 0) | (idx >= n)].reshape(-1)[0]
    raise DimensionError(f"take_rows: index {int(bad)} outside [0, {n})")


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: x[..., n, d], idx[..., m] -> [..., m, d]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-2]:
        raise DimensionError(f"gather: index batch shape {idx.shape} does not match {x.shape}")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        _raise_index(idx, n)
    full_idx = np.broadcast_to(idx[..., None], idx.shape + (x.shape[-1],))
    out = np.take_along_axis(x.data, full_idx, axis=-2)

    def back(g):
        d = x.shape[-1]
        lead = int(np.prod(x.shape[:-2], dtype=np.int64))
        idx2 = idx.reshape(lead, -1)
        flat_idx = (idx2 + n * np.arange(lead)[:, None]).reshape(-1)
        gx = np.zeros((lead * n, d), dtype=g.dtype)
        np.add.at(gx, flat_idx, g.reshape(-1, d))
        return (gx.reshape(x.shape),)

    return _make(np.ascontiguousarray(out), (x,), back, "gather")


# -- fused normalizations ------------------------------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, True = keep) zeroes entries.

    Rows with every entry masked produce all zeros.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        z = np.where(mask, xd, -np.inf)
    else:
        z = xd
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0)
    tot = np.sum(e, axis=-1, keepdims=True)
    y = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0).astype(xd.dtype, copy=False)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} must be ({d},)")
    if not eps > 0:
        raise ContractError("layer_norm: eps must be positive", "tensor-core")
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - np.mean(gx_hat, axis=-1, keepdims=True)
                    - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), back, "layer_norm")


# -- backward ---------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children order, deterministic for a given graph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p._id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}", "tensor-core")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def leaves(root: Tensor) -> list[Tensor]:
    return [n for n in topological_order(root) if n._backward is None and n.requires_grad]


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
