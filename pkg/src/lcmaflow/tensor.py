"""Dense float64 tensors with a small define-by-run reverse-mode engine.

Every operation returns a new immutable :class:`Tensor` that remembers its
parents and a local vector-jacobian rule. :func:`backward` walks the graph
from a scalar root in a fixed topological order and writes gradients into the
reachable :class:`Parameter` leaves.

Broadcasting is intentionally narrow: operands must have identical shapes, or
one of them must be a scalar (a Python number or a 0-d tensor).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "DomainError",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "matmul",
    "reduce_sum",
    "reshape",
    "transpose",
    "concat",
    "slice_",
    "gather",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ArithmeticError):
    """An operation was applied outside its domain or produced a non-finite value."""


_param_counter = itertools.count()


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DomainError(f"{what} produced non-finite values")
    return arr


class Tensor:
    """Immutable float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "parents", "_vjp", "__weakref__")

    def __init__(self, data, _parents: tuple = (), _vjp: Callable | None = None, *, _trusted: bool = False):
        if _trusted:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
            _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    __array_priority__ = 100.0

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf. ``data`` is swapped wholesale by optimizers, never mutated in place."""

    __slots__ = ("id", "grad")

    def __init__(self, data, id: str | None = None):
        super().__init__(data)
        self.id = id if id is not None else f"p{next(_param_counter)}"
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to parameter {self.id} of shape {self.data.shape}")
        _check_finite(arr, f"assignment to {self.id}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(arr: np.ndarray, parents: tuple, vjp: Callable, what: str) -> Tensor:
    _check_finite(arr, what)
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy()
    return Tensor(arr, parents, vjp, _trusted=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcasting is permitted
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, tag: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{tag}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(tag: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name.

    Binary tags (``add``, ``sub``, ``mul``, ``div``) need ``b``; unary tags
    (``exp``, ``log``, ``tanh``, ``sigmoid``, ``neg``) must not receive one.
    """
    if tag in _BINARY:
        if b is None:
            raise ValueError(f"elementwise {tag!r} needs two operands")
        return _BINARY[tag](a, b)
    if tag in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise {tag!r} takes a single operand")
        return _UNARY[tag](a)
    raise ValueError(f"unknown elementwise op {tag!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_sum(a, axes=None) -> Tensor:
    """Sum over ``axes`` (all axes when ``None``), dropping them from the shape."""
    a = _as_tensor(a)
    axes = _normalize_axes(axes, a.data.ndim)
    out = a.data.sum(axis=axes) if axes else a.data.copy()

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _node(np.asarray(out), (a,), vjp, "reduce_sum")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of the axes of {a.shape}")
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    ndim = ts[0].data.ndim
    (axis,) = _normalize_axes(axis, ndim)
    for t in ts[1:]:
        if t.data.ndim != ndim or any(t.shape[d] != ts[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing; use :func:`gather` for index arrays."""
    a = _as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer, type(Ellipsis))):
            raise ShapeError("slice_: only ints, slices and Ellipsis are allowed; use gather")
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(str(exc)) from None

    def vjp(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _node(np.array(out), (a,), vjp, "slice")


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select ``indices`` along ``axis``; repeated indices are allowed."""
    a = _as_tensor(a)
    (axis,) = _normalize_axes(axis, a.data.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather: indices must be one-dimensional")
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for extent {n}")

    unique = idx.size == np.unique(idx % n).size if idx.size else True
    constant = idx.size > 1 and not unique and np.all(idx == idx[0])

    def vjp(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        if unique:
            moved[idx] = gm
        elif constant:
            moved[idx[0]] = gm.sum(axis=0)
        else:
            np.add.at(moved, idx, gm)
        return (full,)

    return _node(np.take(a.data, idx, axis=axis), (a,), vjp, "gather")


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Compute d(root)/d(parameter) for every parameter reachable from ``root``.

    Gradients overwrite ``Parameter.grad`` (they do not accumulate across
    calls), so repeated calls on the same graph give identical results.
    Returns a mapping from parameter id to gradient array.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    result: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = g
            result[node.id] = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
               extrapolate: bool = False) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``f`` is re-evaluated with each parameter coordinate nudged by ``±eps``;
    the error per coordinate is ``|a - fd| / max(|a|, |fd|, 1e-8)``. With
    ``extrapolate`` the quotients at ``eps`` and ``eps / 2`` are combined by
    Richardson extrapolation, which cancels the ``eps**2`` truncation term and
    lets a larger step keep rounding error small on coordinates whose
    gradient is tiny.
    """
    root = f()
    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(root)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.data.copy()
        flat = base.reshape(-1)

        def quotient(i, h):
            orig = flat[i]
            flat[i] = orig + h
            p.assign(base)
            up = float(f().data)
            flat[i] = orig - h
            p.assign(base)
            down = float(f().data)
            flat[i] = orig
            return (up - down) / (2.0 * h)

        for i in range(flat.size):
            fd = quotient(i, eps)
            if extrapolate:
                fd = (4.0 * quotient(i, eps / 2.0) - fd) / 3.0
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        p.assign(base)
    return worst
