"""Dense float tensors with a reverse-mode differentiation tape.

Backward rules are written in terms of :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is itself differentiable. This is
what lets the meta-learning trainer differentiate through unrolled inner
latent updates.

Only the operations the rest of the package needs are provided. Arithmetic
broadcasts like numpy; gradients are summed back to the input shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.special

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a call violates an operation's preconditions."""


@contextlib.contextmanager
def no_grad():
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


class Tensor:
    """An immutable array value, optionally linked into a computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    """Wrap a constant with the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")

    def backward(g):
        ga = g / b
        return unbroadcast(ga, a.shape), unbroadcast(neg(ga * a / b), b.shape)

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a fixed scalar (no gradient w.r.t. ``factor``)."""
    c = a.dtype.type(factor)
    return _make(a.data * c, (a,), lambda g: (scale(g, factor),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (g * scale(a, 2.0),))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * cos(a),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (neg(g * sin(a)),))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out,)

    out = _make(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a,))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g / scale(out, 2.0),)

    out = _make(out_data, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.dtype))
    return _make(a.data * mask.data, (a,), lambda g: (g * mask,))


def elu(a: Tensor) -> Tensor:
    """ELU with unit alpha: ``x`` for ``x > 0`` else ``exp(x) - 1``."""
    pos = Tensor((a.data > 0).astype(a.dtype))
    data = np.where(a.data > 0, a.data, np.expm1(np.minimum(a.data, 0))).astype(a.dtype)

    def backward(g):
        # slope is 1 on the positive side and exp(x) on the negative side
        return (g * (pos + (1 - pos) * exp(minimum0(a))),)

    return _make(data, (a,), backward)


def minimum0(a: Tensor) -> Tensor:
    mask = Tensor((a.data < 0).astype(a.dtype))
    return _make(a.data * mask.data, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out_data = scipy.special.expit(a.data).astype(a.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    out = _make(out_data, (a,), backward)
    return out


def silu(a: Tensor) -> Tensor:
    return a * sigmoid(a)


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch an elementwise operation by name."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "sin": sin,
        "cos": cos,
        "exp": exp,
        "elu": elu,
        "relu": relu,
        "scale": lambda x, factor: scale(as_tensor(x), factor),
    }
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    args = tuple(as_tensor(a) if not isinstance(a, Tensor) and op != "scale" else a for a in args)
    return table[op](*args, **kwargs)


# -- linear algebra ----------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        return a
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (transpose(g),))


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) axes broadcast as in ``np.matmul``."""
    a = as_tensor(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}") from None

    def backward(g):
        return unbroadcast(matmul(g, transpose(b)), a.shape), unbroadcast(matmul(transpose(a), g), b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# -- reductions and shape ops -------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make(np.asarray(data, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def backward(g):
        return (scatter(g, index, a.shape),)

    return _make(np.array(data, dtype=a.dtype), (a,), backward)


def scatter(g: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``index`` (adjoint of indexing)."""
    data = np.zeros(shape, dtype=g.dtype)
    np.add.at(data, index, g.data)
    return _make(data, (g,), lambda gg: (getitem(gg, index),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def cumsum(a: Tensor, axis: int = -1, reverse: bool = False) -> Tensor:
    axis = axis % a.ndim
    if reverse:
        data = np.flip(np.cumsum(np.flip(a.data, axis), axis=axis), axis)
    else:
        data = np.cumsum(a.data, axis=axis)

    def backward(g):
        return (cumsum(g, axis=axis, reverse=not reverse),)

    return _make(np.ascontiguousarray(data, dtype=a.dtype), (a,), backward)


# -- differentiation ---------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are graph nodes, so they
    can be differentiated again (second-order through inner updates). Otherwise
    they are constants.
    """
    if loss.size != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    if not loss.requires_grad:
        if allow_unused:
            return [Tensor(np.zeros_like(w.data)) for w in wrt]
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = _toposort(loss)
    in_graph = {id(n) for n in order}
    for w in wrt:
        if id(w) not in in_graph and not allow_unused:
            raise ContractError(f"tensor {w!r} does not participate in the loss graph")

    # only nodes lying on a path from some ``wrt`` tensor to the loss matter
    targets = {id(w) for w in wrt}
    relevant = set(targets)
    for node in order:
        if any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            if node._backward is None or id(node) not in relevant:
                continue
            if not any(id(p) in relevant for p in node._parents):
                continue
            key = id(node)
            g = grads.get(key) if key in targets else grads.pop(key, None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or id(p) not in relevant:
                    continue
                pk = id(p)
                grads[pk] = grads[pk] + pg if pk in grads else pg
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(Tensor(np.zeros_like(w.data)) if g is None else g)
    return out


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    """A leaf tensor that requires grad."""
    if dtype is None:
        dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def finite_difference_grad(
    fn: Callable[[list[np.ndarray]], float],
    arrays: Iterable[np.ndarray],
    step: float = 1e-3,
) -> list[np.ndarray]:
    """Central finite differences of ``fn`` w.r.t. every entry of ``arrays``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(arrays)
            flat[i] = orig - step
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out
