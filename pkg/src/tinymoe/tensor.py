"""Small dense tensor type with reverse-mode automatic differentiation.

Storage is a row-major numpy array. Every op that sees an input with
``requires_grad`` records a node holding its parents and a closure mapping the
output gradient to one gradient per parent. :func:`backward` walks the graph
once in reverse topological order.

Only the operations the decoder and MoE layers need are provided. Broadcasting
follows numpy rules for the elementwise binary ops.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEBUG_FINITE = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(enabled: bool) -> None:
    """Toggle non-finite checks on every op output."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, a: int, b: int) -> Tensor:
        return transpose(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    @property
    def T(self) -> Tensor:
        if self.ndim != 2:
            raise ShapeError("transpose", self.shape, detail=".T needs a 2-D tensor")
        return transpose(self, 0, 1)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, "div", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # fold batch dims into rows instead of summing per-batch products
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


# -- elementwise unary ----------------------------------------------------

def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def rsqrt(a: Tensor) -> Tensor:
    out = 1.0 / np.sqrt(a.data)
    return _make(out, "rsqrt", (a,), lambda g: (-0.5 * g * out * out * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1 - s)),)

    return _make(out, "silu", (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    out = np.where(mask, a.data.dtype.type(value), a.data)

    def bw(g):
        return (_unbroadcast(np.where(mask, 0, g), a.shape),)

    return _make(out, "masked_fill", (a,), bw)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity (the same object) when not training or p == 0."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout: training mode needs an rng stream")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


def rotary(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs (x[2i], x[2i+1]) of the last axis.

    ``cos`` and ``sin`` hold one angle per pair and broadcast against
    ``a.shape[:-1] + (a.shape[-1] // 2,)``.
    """
    if a.shape[-1] % 2:
        raise ShapeError("rotary", a.shape, detail="last axis must be even")
    cos = cos.astype(a.dtype, copy=False)
    sin = sin.astype(a.dtype, copy=False)

    def rot(x, s):
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = even * cos - odd * s
        out[..., 1::2] = even * s + odd * cos
        return out

    return _make(rot(a.data, sin), "rotary", (a,), lambda g: (rot(g, -sin),))


# -- reductions -----------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), "mean", (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def logsumexp(a: Tensor, keepdims: bool = False) -> Tensor:
    """Log-sum-exp over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.log(s) + m
    probs = e / s

    def bw(g):
        if not keepdims:
            g = g[..., None]
        return (g * probs,)

    return _make(out if keepdims else out[..., 0], "logsumexp", (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean cross-entropy of (N, V) logits against (N,) integer targets."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    valid = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target is ignored")
    safe = np.where(valid, targets, 0)
    if np.any(safe < 0) or np.any(safe >= logits.shape[1]):
        raise ShapeError("cross_entropy", logits.shape, targets.shape, detail="target id out of range")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (np.log(s) + m)[:, 0]
    rows = np.arange(len(safe))
    picked = x[rows, safe]
    losses = np.where(valid, lse - picked, 0)
    out = np.asarray(losses.sum() / n, dtype=x.dtype)

    def bw(g):
        grad = e / s
        grad[rows, safe] -= 1
        grad *= (valid[:, None] * (g / n)).astype(x.dtype)
        return (grad,)

    return _make(out, "cross_entropy", (logits,), bw)


# -- shape and indexing ---------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))
    return _make(out, "transpose", (a,), lambda g: (np.ascontiguousarray(np.swapaxes(g, ax1, ax2)),))


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis %= a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError("slice", a.shape, detail=f"[{start}:{stop}] on axis {axis}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, "slice", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tensors, bw)


def _scatter_rows(g: np.ndarray, index: np.ndarray, axis: int, size: int) -> np.ndarray:
    moved = np.moveaxis(g, axis, 0)
    out = np.zeros((size,) + moved.shape[1:], dtype=g.dtype)
    if index.size:
        # sort-then-reduceat: deterministic and much faster than np.add.at
        order = np.argsort(index, kind="stable")
        sorted_idx = index[order]
        uniq, starts = np.unique(sorted_idx, return_index=True)
        out[uniq] = np.add.reduceat(moved[order], starts, axis=0)
    return np.moveaxis(out, 0, axis)


def index_select(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; ``index`` is 1-D."""
    index = np.asarray(index, dtype=np.int64)
    axis %= a.ndim
    if index.ndim != 1:
        raise ShapeError("index_select", a.shape, index.shape, detail="index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise ShapeError("index_select", a.shape, index.shape, detail="index out of range")
    out = np.take(a.data, index, axis=axis)
    return _make(out, "index_select", (a,), lambda g: (_scatter_rows(g, index, axis, a.shape[axis]),))


def scatter_add(src: Tensor, index: np.ndarray, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``src`` into a zero tensor of extent ``size`` along ``axis``."""
    index = np.asarray(index, dtype=np.int64)
    axis %= src.ndim
    if index.ndim != 1 or index.shape[0] != src.shape[axis]:
        raise ShapeError("scatter_add", src.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError("scatter_add", src.shape, index.shape, detail="index out of range")
    out = _scatter_rows(src.data, index, axis, size)
    return _make(out, "scatter_add", (src,), lambda g: (np.take(g, index, axis=axis),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape, detail="token id out of range")
    flat = ids.reshape(-1)
    out = weight.data[flat].reshape(ids.shape + (weight.shape[1],))

    def bw(g):
        return (_scatter_rows(g.reshape(-1, weight.shape[1]), flat, 0, weight.shape[0]),)

    return _make(out, "embedding", (weight,), bw)


# -- backward -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor that does not require grad")
    if loss._consumed:
        raise GraphError("backward already ran through this graph; rebuild it first")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if pg.shape != p.shape:
                raise GraphError(f"{node._op}: gradient shape {pg.shape} != input shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._backward = None
            node._parents = ()
    loss._consumed = True


Tensor.backward = backward  # type: ignore[attr-defined]


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple[int, tuple[int, ...]] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``f`` is called with no arguments and must read ``x`` (or every tensor in
    the list) through closure. Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("finite_difference_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    y = f()
    if y.data.size != 1:
        raise GraphError(f"finite_difference_check: f must be scalar, got shape {y.shape}")
    backward(y)
    worst_err, worst = 0.0, None
    for k, t in enumerate(xs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                hi = float(f().data)
                flat[i] = orig - step
                lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst_err or worst is None:
                worst_err = max(worst_err, err)
                worst = (k, np.unravel_index(i, t.shape))
    return GradCheckReport(float(worst_err), tolerance, worst)


def param_count(params: dict[str, Tensor]) -> int:
    return sum(int(math.prod(p.shape)) for p in params.values())
