"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation creates a :class:`Node` that remembers its
inputs and a closure mapping the output gradient to input gradients. Nodes
receive a monotonically increasing id at creation, so sorting the nodes
reachable from a loss by id is a valid topological order (inputs always
exist before the operations that consume them).

Explicit reductions (``sum``, ``mean``) accumulate in float64 and cast back
to the operand dtype. ``matmul`` delegates to BLAS in operand precision.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericalError

DEFAULT_DTYPE = np.float32

_grad_state = threading.local()
_node_ids = itertools.count()
_node_lock = threading.Lock()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "node_id")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        with _node_lock:
            self.node_id = next(_node_ids)


class Tape:
    """Operations reachable from an output, in topological order."""

    def __init__(self, tensors: list):
        self.tensors = tensors

    @property
    def nodes(self) -> list:
        return [(t._node.op, [i.node_id for i in t._node.inputs], t) for t in self.tensors]

    @classmethod
    def from_output(cls, out: "Tensor") -> "Tape":
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(i for i in t._node.inputs if i.requires_grad)
        found.sort(key=lambda t: t._node.node_id)
        return cls(found)

    def __len__(self):
        return len(self.tensors)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    # -- metadata ---------------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self):
        return None if self._node is None else self._node.node_id

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- differentiation --------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every leaf that requires it.

        Gradients accumulate into existing ``grad`` fields, so callers reset
        them between steps.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not on the tape (no input requires grad)")
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite loss {self.data!r}")
        seed = np.ones_like(self.data)
        if self._node is None:
            _accumulate_leaf(self, seed)
            return
        grads = {id(self): seed}
        for t in reversed(Tape.from_output(self).tensors):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.data.dtype)
                if gi.shape != inp.data.shape:
                    raise DimensionError(
                        f"{node.op} produced grad of shape {gi.shape} for input {inp.data.shape}")
                if inp._node is None:
                    _accumulate_leaf(inp, gi)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_const_like(other, self), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.ndim == 0:
        arr = arr.astype(ref.dtype)
    return Tensor(arr)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record ``backward_fn`` on the tape when needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    return make_result("mul", a.data * b.data, (a, b),
                       lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                  unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return make_result("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3a x^2), built in place
        d = np.multiply(x2, 3 * 0.044715 * _GELU_C, dtype=x.dtype)
        d += _GELU_C
        d *= x
        s = np.square(t)
        np.subtract(1.0, s, out=s)
        d *= s
        d += 1.0
        d += t
        d *= 0.5
        d *= g
        return (d,)

    return make_result("gelu", out, (a,), backward)


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return make_result("clamp_min", np.maximum(a.data, lo).astype(a.dtype), (a,), lambda g: (g * mask,))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = as_tensor(a)
    b = _const_like(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    k = a.shape[-1]
    if b.ndim == 2:
        # fold leading axes of ``a`` into rows: one large GEMM per pass
        out = np.matmul(a.data.reshape(-1, k), b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = np.matmul(g2, b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = np.matmul(a.data.reshape(-1, k).T, g2) if b.requires_grad else None
            return ga, gb
    elif a.ndim == 2:
        # fold leading axes of ``b`` into columns
        lead = b.shape[:-2]
        n = b.shape[-1]
        bt = np.moveaxis(b.data, -2, 0).reshape(k, -1)
        out = np.moveaxis(np.matmul(a.data, bt).reshape((a.shape[0],) + lead + (n,)), 0, -2)

        def backward(g):
            gt = np.moveaxis(g, -2, 0).reshape(a.shape[0], -1)
            ga = np.matmul(gt, bt.T) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = np.moveaxis(np.matmul(a.data.T, gt).reshape((k,) + lead + (n,)), 0, -2)
            return ga, gb
    else:
        out = np.matmul(a.data, b.data)

        def backward(g):
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
            return ga, gb

    return make_result("matmul", np.ascontiguousarray(out), (a, b), backward)


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result("sum", out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean over an empty axis")
    out = np.mean(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return make_result("mean", out, (a,), backward)


# -- shape manipulation -----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result("getitem", np.array(out, copy=True), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result("stack", out, tensors, backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return make_result("broadcast_to", np.array(out), (a,), lambda g: (unbroadcast(g, a.shape),))
