"""
Reverse-mode automatic differentiation over numpy arrays.

Every operation on a Tensor that requires gradients records its parents and a
closure computing the parents' partials. backward() visits the recorded graph
once in reverse topological order.
"""
import contextlib
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from ..errors import ContractViolation

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (rollouts, reward and target computation)"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """A float64 array with an optional gradient and graph edges"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_owns_grad")
    __array_priority__ = 1000  # make numpy defer to Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._owns_grad = False
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # ------------------------------------------------------------------
    # basics
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        # the first gradient may be shared with other nodes; it is only read,
        # and the buffer becomes private on the second contribution
        if self.grad is None:
            self.grad = g
            self._owns_grad = False
        elif self._owns_grad:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owns_grad = True

    def zero_grad(self):
        self.grad = None
        self._owns_grad = False

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None):
        """
        Back-propagate from this tensor.

        Args:
            grad: Upstream gradient; defaults to ones for a scalar
        """
        if not self.requires_grad:
            raise ContractViolation("backward() on a tensor that does not require gradients")
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            if node._backward is not None:
                node.zero_grad()
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # operators
    # ------------------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Parameter(Tensor):
    """A trainable leaf tensor"""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def graph_parameters(root: Tensor) -> List[Parameter]:
    """Parameters reachable from a tensor through recorded edges"""
    return [node for node in _topological_order(root) if isinstance(node, Parameter)]


# ============================================================================
# HELPERS
# ============================================================================

def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to an operand's shape"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shapes(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ============================================================================
# ELEMENTWISE ARITHMETIC
# ============================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# ============================================================================
# LINEAR ALGEBRA AND SHAPES
# ============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(data, (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing (no repeated fancy indices)"""
    data = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        x._accumulate(full)

    return _result(data, (x,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractViolation(f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _result(data, tensors, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractViolation(f"stack: shapes {[t.shape for t in tensors]} differ") from None

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _result(data, tensors, backward)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """table[indices] along the first axis; repeated indices accumulate"""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ContractViolation(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        table._accumulate(full)

    return _result(table.data[indices], (table,), backward)


def take_along(x: Tensor, indices: np.ndarray) -> Tensor:
    """x[i, indices[i]] for a 2-D x; returns shape [B]"""
    indices = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or indices.shape != (x.shape[0],):
        raise ContractViolation(f"take_along: x {x.shape} with indices {indices.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, indices), g)
        x._accumulate(full)

    return _result(x.data[rows, indices], (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by a constant; no gradient flows there"""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def backward(g):
        x._accumulate(np.where(mask, 0.0, g))

    return _result(np.where(mask, value, x.data), (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accumulate(g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), backward)


# ============================================================================
# NONLINEARITIES
# ============================================================================

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _result(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _result(y, (x,), backward)


def gru_cell(
    x: Tensor,
    h: Tensor,
    w_i: Tensor,
    w_h: Tensor,
    b_i: Tensor,
    b_h: Tensor,
    keep: Optional[np.ndarray] = None,
) -> Tensor:
    """
    One fused gated recurrent step with combined [r | z | n] weight blocks.

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h

    Rows where keep is 0 return h unchanged.
    """
    H = h.shape[1]
    if w_i.shape[1] != 3 * H or w_h.shape != (H, 3 * H) or x.shape[1] != w_i.shape[0]:
        raise ContractViolation(f"gru_cell: x {x.shape}, h {h.shape}, w_i {w_i.shape}, w_h {w_h.shape}")
    gi = x.data @ w_i.data + b_i.data
    gh = h.data @ w_h.data + b_h.data
    r = expit(gi[:, :H] + gh[:, :H])
    z = expit(gi[:, H:2 * H] + gh[:, H:2 * H])
    gh_n = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * gh_n)
    out = n + z * (h.data - n)
    if keep is not None:
        keep = np.asarray(keep, dtype=np.float64).reshape(-1, 1)
        out = h.data + keep * (out - h.data)

    def backward(g):
        direct = g if keep is None else g * keep
        d_n = direct * (1.0 - z)
        d_pre_n = d_n * (1.0 - n * n)
        d_pre_r = d_pre_n * gh_n * r * (1.0 - r)
        d_pre_z = direct * (h.data - n) * z * (1.0 - z)
        d_gi = np.concatenate([d_pre_r, d_pre_z, d_pre_n], axis=1)
        d_gh = np.concatenate([d_pre_r, d_pre_z, d_pre_n * r], axis=1)
        if x.requires_grad:
            x._accumulate(d_gi @ w_i.data.T)
        if h.requires_grad:
            carry = direct * z if keep is None else direct * z + g * (1.0 - keep)
            h._accumulate(carry + d_gh @ w_h.data.T)
        if w_i.requires_grad:
            w_i._accumulate(x.data.T @ d_gi)
        if w_h.requires_grad:
            w_h._accumulate(h.data.T @ d_gh)
        if b_i.requires_grad:
            b_i._accumulate(d_gi.sum(axis=0))
        if b_h.requires_grad:
            b_h._accumulate(d_gh.sum(axis=0))

    return _result(out, (x, h, w_i, w_h, b_i, b_h), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        x._accumulate(g * y)

    return _result(y, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractViolation("log of a non-positive value")

    def backward(g):
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), backward)


def log_softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise log-softmax over the last axis of a 2-D tensor.

    With a mask, entries where mask is False get -inf (probability exactly 0)
    and receive no gradient. Every row needs at least one valid entry.
    """
    if x.ndim != 2:
        raise ContractViolation(f"log_softmax expects a 2-D tensor, got {x.shape}")
    valid = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not valid.any(axis=1).all():
        raise ContractViolation("log_softmax: a row has no valid entry")
    z = np.where(valid, x.data, -np.inf)
    top = z.max(axis=1, keepdims=True)
    lse = top + np.log(np.exp(z - top).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        g = np.where(valid, g, 0.0)
        x._accumulate(g - p * g.sum(axis=1, keepdims=True))

    return _result(y, (x,), backward)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    return exp(log_softmax(x, mask))


# ============================================================================
# REDUCTIONS
# ============================================================================

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def dot(a: Tensor, b: ArrayLike) -> Tensor:
    """Sum of an elementwise product"""
    return reduce_sum(mul(a, b))
