"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a watched
tensor. Each record holds the parent handles and a closure mapping the
output cotangent to one cotangent per parent. :func:`backward` walks the
record in reverse append order, which is a valid reverse topological order
because parents are always recorded before their children.

Shapes are strict. The only implicit expansion allowed is a trailing-vector
operand (shape ``(D,)`` against ``(..., D)``) for elementwise arithmetic, which
is what bias and gain vectors need. Anything else is a :class:`ShapeError`.

Usage::

    with Tape() as tape:
        w = tape.watch("w", w_array)
        loss = ad.sum(ad.mul(w, w))
    grads = backward(loss, tape)      # {"w": 2 * w_array}
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Raised for tape misuse (foreign tensors, non-scalar loss, ...)."""


class _Node:
    __slots__ = ("parents", "vjp", "name")

    def __init__(self, parents: tuple, vjp: Optional[VJP], name: Optional[str]):
        self.parents = parents
        self.vjp = vjp
        self.name = name


_active = threading.local()


class Tape:
    """Append-only operation record for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self._leaf_meta: dict[str, tuple] = {}
        self.closed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.stack.pop()

    def watch(self, name: str, value: ArrayLike, dtype=None) -> "Tensor":
        """Register a named leaf whose gradient :func:`backward` will report."""
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} already watched on this tape")
        data = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=dtype)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.nodes.append(_Node((), None, name))
        gid = len(self.nodes) - 1
        self.leaves[name] = gid
        self._leaf_meta[name] = (data.shape, data.dtype)
        return Tensor(data, tape=self, grad_id=gid)

    def _record(self, parents: tuple, vjp: VJP) -> int:
        self.nodes.append(_Node(parents, vjp, None))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """An immutable n-dimensional array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "grad_id")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None, grad_id: Optional[int] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.tape = tape
        self.grad_id = grad_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.grad_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", grad_id={self.grad_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap python scalars so they take the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _tape_of(tensors: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.grad_id is None:
            continue
        if t.tape.closed:
            raise TapeError("tensor belongs to a tape that has already been consumed")
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands belong to different tapes")
    return tape


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _tape_of(parents)
    if tape is None:
        return Tensor(data)
    handles = tuple(p.grad_id for p in parents)
    return Tensor(data, tape=tape, grad_id=tape._record(handles, vjp))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> int:
    """Return 0 for equal shapes, 1 if ``b`` is a trailing vector or scalar, 2 if ``a`` is."""
    if a.shape == b.shape:
        return 0
    if b.ndim <= 1 and (b.shape == () or (a.ndim >= 1 and b.shape == a.shape[-1:])):
        return 1
    if a.ndim <= 1 and (a.shape == () or (b.ndim >= 1 and a.shape == b.shape[-1:])):
        return 2
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_elementwise("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``(m, k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        a.ndim == b.ndim
        and a.ndim in (2, 3)
        and a.shape[-1] == b.shape[-2]
        and a.shape[:-2] == b.shape[:-2]
    )
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w (+ b)`` applied over the last axis of ``x`` (any leading extents)."""
    lead = x.shape[:-1]
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = matmul(reshape(x, (-1, x.shape[-1])), w) if x.ndim != 2 else matmul(x, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],)) if x.ndim != 2 else y


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def gather(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select rows ``a[index]`` along axis 0. Repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather: index must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for leading extent {a.shape[0]}")
    src = a.shape

    def vjp(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def scatter(a: Tensor, index: Sequence[int], size: int) -> Tensor:
    """Place row ``k`` of ``a`` at row ``index[k]`` of a zero tensor with ``size`` rows."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter: {idx.shape[0] if idx.ndim else 0} indices for {a.shape[0]} rows")
    out = np.zeros((size,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, idx, a.data)
    return _make(out, (a,), lambda g: (g[idx],))


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for vocabulary of {table.shape[0]}")
    flat = gather(table, ids.reshape(-1))
    return reshape(flat, ids.shape + table.shape[1:])


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first arg-max."""
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    src = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), g, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis)
    p = np.exp(x.data - m) / s

    def vjp(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing vector to zero mean and unit (biased) variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    var_eps = var + eps
    inv = 1.0 / np.sqrt(var_eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return dx, gg, gb

    return _make(xhat * gd + bias.data, (x, gain, bias), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each trailing vector to unit Euclidean length."""
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = xd / denom

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / denom,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape, seed: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Accumulate gradients of scalar ``loss`` into every named leaf of ``tape``.

    Each node is visited once, in reverse append order. Leaves that the loss
    does not depend on get zero gradients.
    """
    if loss.shape != () and loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.grad_id is None or loss.tape is not tape:
        raise TapeError("backward: loss is not recorded on this tape")
    if tape.closed:
        raise TapeError("backward: tape already consumed")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.grad_id] = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)
    for i in range(loss.grad_id, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
        grads[i] = None
    out = {}
    for name, gid in tape.leaves.items():
        g = grads[gid]
        if g is None:
            shape, dtype = tape._leaf_meta[name]
            g = np.zeros(shape, dtype=dtype)
        out[name] = g
    tape.closed = True
    return out
