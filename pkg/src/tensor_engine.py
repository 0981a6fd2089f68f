"""
Tensor Engine

Dense N-dimensional arrays with reverse-mode automatic differentiation.
Values are numpy arrays; every differentiable operation records a Node that
links the result to its parents together with the rule that maps the
output gradient to parent gradients. Graphs are built eagerly at op time.

Precision follows the inputs: build parameters in float64 for gradient
checks and in float32 for training runs.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from hprn_errors import ContractError, DimensionError

DIV_GUARD = 1e-8

PRECISIONS = {
    "float32": np.float32,
    "float64": np.float64,
}


def resolve_dtype(precision: str):
    """Map a precision name ("float32" | "float64") to its numpy dtype."""
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractError(f"Unknown precision '{precision}'. Valid: {sorted(PRECISIONS)}")


# ========================================
# Diagnostics
# ========================================
class Diagnostics:
    """Counters for numerically guarded operations."""

    def __init__(self):
        self.div_clamped = 0

    def reset(self):
        self.div_clamped = 0

    def snapshot(self) -> dict:
        return {"div_clamped": self.div_clamped}


diagnostics = Diagnostics()


class KinkRecorder:
    """Collects the sign pattern of every non-smooth op input seen while active."""

    def __init__(self):
        self.signatures: List[np.ndarray] = []

    def matches(self, other: "KinkRecorder") -> bool:
        if len(self.signatures) != len(other.signatures):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.signatures, other.signatures))


_active_recorders: List[KinkRecorder] = []


@contextmanager
def record_kinks():
    """Record sign patterns of abs/PReLU inputs for the duration of the block."""
    recorder = KinkRecorder()
    _active_recorders.append(recorder)
    try:
        yield recorder
    finally:
        _active_recorders.remove(recorder)


def note_kink(values: np.ndarray):
    for recorder in _active_recorders:
        recorder.signatures.append(values > 0)


# ========================================
# Shapes
# ========================================
@dataclass(frozen=True)
class Shape:
    """Ordered dimension sizes with semantic axis labels (channel, height, width, group, item)."""

    dims: Tuple[int, ...]
    axes: Tuple[str, ...] = ()

    def __post_init__(self):
        if any(int(d) < 1 for d in self.dims):
            raise DimensionError(f"All dimensions must be >= 1, got {self.dims}")
        if self.axes and len(self.axes) != len(self.dims):
            raise DimensionError(f"Axis labels {self.axes} do not match dims {self.dims}")

    def __str__(self) -> str:
        if not self.axes:
            return "x".join(str(d) for d in self.dims)
        return "x".join(f"{a}={d}" for a, d in zip(self.axes, self.dims))

    def check(self, tensor: "Tensor", what: str = "tensor"):
        """Raise DimensionError unless tensor has exactly these dims."""
        if tuple(tensor.shape) != tuple(self.dims):
            raise DimensionError(f"{what}: expected shape {self}, got {tuple(tensor.shape)}")


# ========================================
# Tensor
# ========================================
@dataclass
class Node:
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tensor:
    """N-dimensional real array with an optional gradient record."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node: Optional[Node] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.node = Node(tuple(parents), backward, op)
        return out

    # --- properties ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # --- differentiation ---
    def backward(self):
        """Populate .grad of every leaf that requires grad and is reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        grads = {id(self): np.ones_like(self.data)}
        for tensor in reversed(_topological_order(self)):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            if tensor.node is None:
                # Leaves accumulate; zeroing is the caller's job
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            parent_grads = tensor.node.backward(g)
            for parent, pg in zip(tensor.node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # --- operators ---
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

    def __matmul__(self, other):
        if self.ndim == 3:
            return batched_matmul(self, other)
        return matmul(self, other)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Parents-before-children order of every grad-requiring tensor feeding root."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ========================================
# Elementwise
# ========================================
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """a / b with |b| clamped to at least DIV_GUARD; clamps are counted in diagnostics."""
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    small = np.abs(b.data) < DIV_GUARD
    n_small = int(np.count_nonzero(small))
    if n_small:
        diagnostics.div_clamped += n_small
        denom = np.where(small, np.where(b.data < 0, -DIV_GUARD, DIV_GUARD), b.data).astype(b.dtype)
    else:
        denom = b.data

    def backward(g):
        ga = _unbroadcast(g / denom, a.shape)
        gb = -g * a.data / (denom * denom)
        if n_small:
            gb = np.where(small, 0.0, gb)
        return ga, _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data / denom, (a, b), backward, "div")


def abs_(a: Tensor) -> Tensor:
    note_kink(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return Tensor.from_op(np.abs(a.data), (a,), backward, "abs")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return Tensor.from_op(a.data * factor, (a,), backward, "scale")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of add | sub | mul | div | abs | scale by name."""
    if op == "abs":
        return abs_(a)
    if op == "scale":
        return scale(a, float(b))
    table = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op not in table:
        raise ContractError(f"Unknown elementwise op '{op}'")
    return table[op](a, b)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ========================================
# Products
# ========================================
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"batched_matmul: expected 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batched_matmul: batch sizes differ, {a.shape} vs {b.shape}")
    if a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul: inner dims differ, {a.shape} vs {b.shape}")

    def backward(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return Tensor.from_op(np.matmul(a.data, b.data), (a, b), backward, "batched_matmul")


# ========================================
# Rearrangement
# ========================================
def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != t.numel():
        raise DimensionError(f"reshape: cannot view {t.shape} ({t.numel()} elements) as {shape}")
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {t.shape} as {shape}")
    original = t.shape

    def backward(g):
        return (g.reshape(original),)

    return Tensor.from_op(out, (t,), backward, "reshape")


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of the {t.ndim} axes of {t.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor.from_op(t.data.transpose(axes), (t,), backward, "permute")


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got {t.shape}")
    axes = list(range(t.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return permute(t, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(tensors), backward, "concat")


def take(t: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather entries along one axis; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    if axis < 0:
        axis += t.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= t.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of {t.shape}")

    def backward(g):
        out = np.zeros_like(t.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor.from_op(np.take(t.data, indices, axis=axis), (t,), backward, "take")


# ========================================
# Reductions
# ========================================
def _normalize_axes(t: Tensor, axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(t.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -t.ndim <= axis < t.ndim:
            raise DimensionError(f"reduce: axis {axis} is invalid for shape {t.shape}")
        normalized.append(axis % t.ndim)
    return tuple(sorted(set(normalized)))


def reduce_sum(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(t, axes)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(t.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept_shape), t.shape),)

    return Tensor.from_op(t.data.sum(axis=axes, keepdims=keepdims), (t,), backward, "sum")


def reduce_mean(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(t, axes)
    count = int(np.prod([t.shape[a] for a in axes])) if axes else 1
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(t.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept_shape) / count, t.shape),)

    return Tensor.from_op(t.data.mean(axis=axes, keepdims=keepdims), (t,), backward, "mean")


def reduce(kind: str, t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return reduce_sum(t, axes, keepdims)
    if kind == "mean":
        return reduce_mean(t, axes, keepdims)
    raise ContractError(f"Unknown reduction '{kind}'")
