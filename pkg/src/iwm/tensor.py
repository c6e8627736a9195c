"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every operation produces a :class:`Tensor` node that remembers its parents and
a vector-Jacobian rule. The graph is recorded eagerly while the forward pass
runs; :func:`backward` replays it in reverse topological order.

Only nodes that (transitively) depend on a tensor with ``requires_grad=True``
are recorded, so teacher and evaluation passes cost nothing extra.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

# Closed set of recorded operation kinds. Each has a VJP below and a
# finite-difference check in the self-test suite.
OP_KINDS = (
    "matmul", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "power",
    "sum", "mean", "broadcast", "reshape", "transpose", "concat", "slice",
    "gather_rows", "gelu", "relu", "softmax", "layer_norm",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, shape: tuple):
        super().__init__(f"non-finite value produced by {op} node with shape {shape}")
        self.op = op
        self.shape = shape


_state = {"grad_enabled": True, "check_finite": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_check_finite(flag: bool) -> bool:
    """Toggle per-node NaN/Inf detection; returns the previous setting."""
    prev = _state["check_finite"]
    _state["check_finite"] = bool(flag)
    return prev


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "vjp", "name")

    __array_priority__ = 100  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _lift(a, b):
    """Convert python scalars / arrays to constants matching the other operand's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _state["check_finite"] and not np.isfinite(out).all():
        raise NonFiniteError(op, out.shape)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.name = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t.parents = tuple(parents)
        t.vjp = vjp
    else:
        t.requires_grad = False
        t.op = "leaf" if not parents else "const"
        t.parents = ()
        t.vjp = None
    return t


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------

def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _make("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** exponent
    return _make("power", out, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),))


# -- reductions and shape ops --------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), vjp)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: {a.shape} -> {shape}") from exc
    return _make("broadcast", out, (a,), lambda g: (unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make("concat", out, tensors, vjp)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (part is None or part is Ellipsis or isinstance(part, (int, np.integer, slice))):
            raise TypeError("slice supports basic indexing only; use gather_rows for index arrays")
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make("slice", out, (a,), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along the token axis.

    ``a`` is (N, d) or (B, N, d); ``index`` is an integer array (B, K).
    The result is (B, K, d) with ``out[b, k] = a[b, index[b, k]]`` (or
    ``a[index[b, k]]`` for an unbatched table).
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2:
        raise ShapeError(f"gather_rows: index must be 2-D, got {index.shape}")
    if a.ndim == 2:
        n, d = a.shape
        out = a.data[index]

        def vjp(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index.reshape(-1), g.reshape(-1, d))
            return (full,)

    elif a.ndim == 3:
        bsz, n, d = a.shape
        if index.shape[0] != bsz:
            raise ShapeError(f"gather_rows: batch {bsz} vs index {index.shape}")
        flat = (index + np.arange(bsz)[:, None] * n).reshape(-1)
        out = a.data.reshape(bsz * n, d)[flat].reshape(bsz, index.shape[1], d)

        def vjp(g):
            full = np.zeros((bsz * n, d), dtype=a.dtype)
            np.add.at(full, flat, g.reshape(-1, d))
            return (full.reshape(a.shape),)

    else:
        raise ShapeError(f"gather_rows: expected 2-D or 3-D input, got {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError("gather_rows: index out of range")
    return _make("gather_rows", out, (a,), vjp)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), vjp)


# -- nonlinearities ------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make("layer_norm", out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    z = a - shift
    return z - log(sum_(exp(z), axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -mean(sum_(log_softmax(logits, -1) * onehot, axis=-1))


# -- reverse pass ----------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to leaf tensors.

    Returns a mapping ``id(leaf) -> gradient``. Leaves listed in ``leaves``
    that the output does not depend on receive zero gradients.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    result: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topo_order(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                result[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in result:
                result[id(leaf)] = np.zeros_like(leaf.data)
    return result


def grad(output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Name-keyed gradients for a parameter dict."""
    by_id = backward(output, params.values())
    return {name: by_id[id(t)] for name, t in params.items()}
