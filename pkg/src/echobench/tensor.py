"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations record their parents and a
closure mapping the output adjoint to parent adjoints; :func:`backward` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached a tensor on the training path."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *,
                 _parents: tuple["Tensor", ...] = (), _backward: BackwardFn | None = None,
                 op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Create a graph node. ``backward_fn(g)`` returns one adjoint (or None) per parent."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _backward=backward_fn, op=op)


# ---------------------------------------------------------------------------
# elementwise

def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    dtype = a.dtype if isinstance(a, Tensor) else b.dtype
    a, b = as_tensor(a, dtype), as_tensor(b, dtype)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"elementwise operands must match or be scalar: {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the origin
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.array(a.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return make_op(out, (a,), backward, "take")


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _check_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack needs equal shapes: {shape} vs {t.shape}")
    axis = _check_axis(axis, len(shape) + 1)
    out = np.stack([t.data for t in tensors], axis=axis)
    return make_op(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_check_axis(ax, ndim) for ax in axis))


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return make_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), a.shape).copy(),)

    return make_op(out, (a,), backward, "mean")


def max_(a: Tensor, axis=None) -> Tensor:
    """Max reduction; the adjoint goes to the first maximal element."""
    axes = _norm_axes(axis, a.ndim)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], np.asarray(g)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return make_op(out, (a,), backward, "max")


# ---------------------------------------------------------------------------
# differentiation

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Returns a mapping from leaf tensor to gradient and also stores each leaf's
    gradient in ``leaf.grad``. Leaves listed in ``wrt`` that the root does not
    depend on receive zeros.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    adjoints: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(_topological_order(root)):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            leaves[id(node)] = node
            adjoints[id(node)] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"adjoint shape {pg.shape} != value shape {p.shape} in op {node.op!r}")
            if id(p) in adjoints:
                adjoints[id(p)] = adjoints[id(p)] + pg
            else:
                adjoints[id(p)] = pg
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        leaf.grad = adjoints[key]
        result[leaf] = adjoints[key]
    if wrt is not None:
        for leaf in wrt:
            if leaf not in result:
                leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    return result


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {where} (shape {t.shape})")
    return t


# ---------------------------------------------------------------------------
# convolution geometry

@dataclass(frozen=True)
class ConvGeometry:
    input_extent: int
    filter_extent: int
    pad_start: int = 0
    pad_end: int = 0
    stride: int = 1
    output_extent: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "output_extent",
                           conv_output_extent(self.input_extent, self.filter_extent,
                                              self.pad_start, self.pad_end, self.stride))


def conv_output_extent(input_extent: int, filter_extent: int, pad_start: int = 0,
                       pad_end: int = 0, stride: int = 1) -> int:
    """Number of filter placements along one axis: floor((I - F + Ps + Pe) / S) + 1."""
    if input_extent < 1 or filter_extent < 1 or stride < 1:
        raise ValueError("input, filter and stride extents must be >= 1")
    if pad_start < 0 or pad_end < 0:
        raise ValueError("padding must be non-negative")
    padded = input_extent + pad_start + pad_end
    if padded < filter_extent:
        raise ValueError(f"padded input {padded} smaller than filter {filter_extent}")
    return (padded - filter_extent) // stride + 1


def same_padding(input_extent: int, filter_extent: int, stride: int = 1) -> tuple[int, int]:
    """Padding that yields ceil(I / S) outputs; the extra pixel goes at the end."""
    out = -(-input_extent // stride)
    total = max((out - 1) * stride + filter_extent - input_extent, 0)
    return total // 2, total - total // 2


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_error: list[float]
    checked: list[int]

    def __str__(self):
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        return f"grad_check {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g}; max errors [{errs}])"


def relative_error(analytic: float, numeric: float) -> float:
    a, n = abs(analytic), abs(numeric)
    if a < 1e-6 and n < 1e-6:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / max(a, n, 1e-8)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray | Tensor], tolerance: float = 1e-4,
               eps: float | Sequence[float] = 1e-6, max_checks: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``fn`` is called with fresh leaf tensors each time; it must be deterministic.
    With ``max_checks`` set, that many randomly chosen entries per input are probed.
    ``eps`` may be a sequence of steps tried in order: an entry stops at the first
    step within tolerance and otherwise reports its smallest error. Piecewise-smooth
    losses need this, since kinks want a small step and roundoff a large one.
    """
    steps = [float(eps)] if np.isscalar(eps) else [float(e) for e in eps]
    if not steps or min(steps) <= 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    grads = backward(out, wrt=leaves)
    rng = rng or np.random.default_rng(0)

    def evaluate(values):
        return float(fn(*[Tensor(v) for v in values]).data)

    max_errors, counts = [], []
    for i, arr in enumerate(arrays):
        analytic = grads[leaves[i]]
        if max_checks is not None and arr.size > max_checks:
            idx = rng.choice(arr.size, size=max_checks, replace=False)
        else:
            idx = np.arange(arr.size)
        worst = 0.0
        for j in idx:
            probe = [a.copy() for a in arrays]
            flat = probe[i].reshape(-1)
            orig = flat[j]
            best = np.inf
            for step in steps:
                flat[j] = orig + step
                plus = evaluate(probe)
                flat[j] = orig - step
                minus = evaluate(probe)
                best = min(best, relative_error(float(analytic.reshape(-1)[j]), (plus - minus) / (2 * step)))
                if best < tolerance:
                    break
            worst = max(worst, best)
        max_errors.append(worst)
        counts.append(len(idx))
    return GradCheckReport(all(e < tolerance for e in max_errors), tolerance, max_errors, counts)
