"""Dense float tensors with reverse-mode automatic differentiation.

Design notes:

* Data lives in a row-major numpy array, float32 by default; float64 exists
  for gradient checking. Binary ops require matching dtypes.
* Broadcasting is deliberately narrow: scalars, or arrays of equal rank
  whose dimensions agree or are 1. There is no rank promotion.
* Every differentiable op attaches an OpNode to its output. backward()
  linearizes the graph reached from the loss into a GradTape and replays
  it in reverse, accumulating fresh gradient buffers (previous .grad
  contents are discarded, so two passes over the same graph agree bitwise).
* Reductions delegate to numpy's pairwise summation, which is a fixed
  evaluation order, so results are reproducible run to run.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction (thread-local), e.g. for pure inference."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class OpNode:
    """One executed differentiable operation: operands, output, pullback."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor",
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"OpNode({self.op}, out_shape={self.output.shape})"


class Tensor:
    """n-dimensional float array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: OpNode | None = None

    # ---- basic introspection -------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        """Dtype-cast copy; not part of the differentiable graph."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ---- factories ------------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value, dtype=np.float32) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype))

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not provided; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, *axes)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)


def _make_op(op: str, inputs: Sequence[Tensor], data: np.ndarray,
             backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(op, tuple(inputs), out, backward_fn)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtypes(op: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise UsageError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.ndim != b.ndim and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: ranks differ: {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: shapes do not align: {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of the limited broadcast)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes("add", a, b)
    _check_broadcast("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_op("add", (a, b), a.data + b.data, backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes("mul", a, b)
    _check_broadcast("mul", a, b)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make_op("mul", (a, b), a.data * b.data, backward_fn)


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward_fn(g):
        return (g * y,)

    return _make_op("exp", (x,), y, backward_fn)


def tlog(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (g / x.data,)

    return _make_op("log", (x,), np.log(x.data), backward_fn)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(x.data, lo, hi)

    def backward_fn(g):
        inside = (x.data >= lo) & (x.data <= hi)
        return (g * inside.astype(x.dtype),)

    return _make_op("clamp", (x,), y, backward_fn)


# ---- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    _check_dtypes("matmul", a, b)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make_op("matmul", (a, b), a.data @ b.data, backward_fn)


# ---- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    new = np.reshape(x.data, shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _make_op("reshape", (x,), new, backward_fn)


def transpose(x: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of the {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _make_op("transpose", (x,), x.data.transpose(axes), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty sequence")
    _check_dtypes("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make_op("concat", tuple(tensors), data, backward_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {x.shape}")
    index = tuple(slice(None) if d != axis else slice(start, start + length)
                  for d in range(x.ndim))

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[index] = g
        return (gx,)

    return _make_op("narrow", (x,), x.data[index].copy(), backward_fn)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise UsageError(f"index_select expects a 1-D index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise UsageError(f"index_select: indices out of range for axis {axis} of {x.shape}")

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make_op("index_select", (x,), np.take(x.data, idx, axis=axis), backward_fn)


# ---- reductions -------------------------------------------------------------


def _reduce_backward(x: Tensor, axis, g: np.ndarray) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, x.shape).astype(x.dtype)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x.shape).astype(x.dtype)


def tsum(x: Tensor, axis=None) -> Tensor:
    def backward_fn(g):
        return (_reduce_backward(x, axis, g),)

    return _make_op("sum", (x,), np.sum(x.data, axis=axis), backward_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def backward_fn(g):
        return (_reduce_backward(x, axis, g) / np.asarray(count, dtype=x.dtype),)

    return _make_op("mean", (x,), np.mean(x.data, axis=axis), backward_fn)


# ---- the tape and backward ---------------------------------------------------


class GradTape:
    """Topologically ordered record of the ops reachable from one output.

    Replaying the record in reverse accumulates into each requires_grad
    tensor exactly once per pass: all gradient buffers in the subgraph are
    reset first, then every op adds its contributions.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[OpNode]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "GradTape":
        nodes: list[OpNode] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(nodes)
        # Iterative post-order; child order is the op's operand order, so
        # the linearization (and thus backward) is deterministic.
        stack: list[tuple[OpNode, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.inputs):
                if parent.node is not None and id(parent.node) not in seen:
                    stack.append((parent.node, False))
        return cls(nodes)

    def tensors(self):
        out = {}
        for node in self.nodes:
            out[id(node.output)] = node.output
            for t in node.inputs:
                out[id(t)] = t
        return out.values()

    def replay_backward(self, root: Tensor):
        for t in self.tensors():
            t.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            contributions = node.backward_fn(g)
            for t, gin in zip(node.inputs, contributions):
                if gin is None or not t.requires_grad:
                    continue
                gin = np.asarray(gin, dtype=t.dtype)
                t.grad = gin if t.grad is None else t.grad + gin


def backward(loss: Tensor):
    """Populate .grad of every requires_grad tensor reachable from `loss`."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any requires_grad tensor")
    GradTape.from_output(loss).replay_backward(loss)


# ---- finite-difference oracle -------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function.

    Builds a fresh input tensor per evaluation, so `f` must read its
    argument rather than a captured copy of x.
    """
    base = np.array(x.data, dtype=x.dtype)
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_base.size):
        original = flat_base[i]
        flat_base[i] = original + eps
        f_plus = float(f(Tensor(base)).data)
        flat_base[i] = original - eps
        f_minus = float(f(Tensor(base)).data)
        flat_base[i] = original
        flat_grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad)


def grad_error(build_loss: Callable[[], Tensor], leaf: Tensor, eps: float | None = None,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Relative error between backward() and central differences on `leaf`.

    `build_loss` re-runs the forward pass reading leaf.data, which is
    perturbed in place between evaluations. Error is
    ||g_analytic - g_numeric||_inf / max(1, ||g_analytic||_inf, ||g_numeric||_inf),
    optionally over a random sample of elements (for large leaves).
    """
    if eps is None:
        eps = 1e-4 if leaf.dtype == np.float64 else 1e-2
    loss = build_loss()
    backward(loss)
    if leaf.grad is None:
        raise UsageError("leaf received no gradient; is it part of the graph?")
    analytic = leaf.grad.reshape(-1).astype(np.float64)

    n = leaf.data.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        idxs = rng.choice(n, size=sample, replace=False)
    else:
        idxs = np.arange(n)

    flat = leaf.data.reshape(-1)
    numeric = np.zeros(idxs.size, dtype=np.float64)
    for j, i in enumerate(idxs):
        original = flat[i]
        flat[i] = original + eps
        f_plus = float(build_loss().data)
        flat[i] = original - eps
        f_minus = float(build_loss().data)
        flat[i] = original
        numeric[j] = (f_plus - f_minus) / (2.0 * eps)

    picked = analytic[idxs]
    scale = max(1.0, float(np.abs(picked).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(picked - numeric).max(initial=0.0) / scale)
