"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation returns a new ``Tensor``
node holding its value, its parents, and a closure that scatters the
output gradient back onto the parents.  ``backward`` walks the graph once
in reverse topological order.  All numerics are double precision.

A graph and its tensors are confined to one thread for the duration of a
forward/backward pass; distinct graphs over read-only shared parameter
values may run concurrently.  There is no internal locking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InputTooShortError, ShapeError

DIV_EPS = 1e-8


class Tensor:
    """A dense float64 array plus its position in the computation graph.

    ``data`` is the forward value (row-major ndarray, possibly 0-d for
    scalars), ``grad`` is lazily allocated by ``backward``.  Nodes with
    ``requires_grad=False`` are treated as constants: no gradient is
    stored and their subgraphs are skipped during the backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, parents=(), op="leaf", requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # operator sugar; constants are lifted to non-grad leaves
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

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class Parameter:
    """A named leaf tensor; non-trainable parameters never receive updates."""

    node: Tensor
    name: str
    trainable: bool = True

    def __post_init__(self):
        # gradients are only computed where they can be consumed
        self.node.requires_grad = self.trainable

    @property
    def data(self):
        return self.node.data

    @data.setter
    def data(self, value):
        self.node.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self):
        return self.node.grad


def as_tensor(x, requires_grad=False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def assert_finite(t: Tensor, context: str = "tensor"):
    """NaN/Inf anywhere in a forward value is an error state."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {context}")


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    out = Tensor(a.data + b.data, (a, b), "add")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    out = Tensor(a.data - b.data, (a, b), "sub")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b), "mul")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _bw
    return out


def div(a, b) -> Tensor:
    """Exact elementwise division; callers must guarantee b != 0."""
    a, b = _binary(a, b, "div")
    out = Tensor(a.data / b.data, (a, b), "div")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = _bw
    return out


def div_guarded(a, b, eps=DIV_EPS) -> Tensor:
    """a / (b + eps); the additive guard keeps the graph finite near b = 0."""
    a, b = _binary(a, b, "div_guarded")
    denom = b.data + eps
    out = Tensor(a.data / denom, (a, b), "div_guarded")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / denom, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (denom * denom), b.shape))

    out._backward = _bw
    return out


def div_maxguard(a, b, eps=DIV_EPS) -> Tensor:
    """a / max(b, eps); exact wherever b >= eps, clamped (zero b-grad) below."""
    a, b = _binary(a, b, "div_maxguard")
    denom = np.maximum(b.data, eps)
    out = Tensor(a.data / denom, (a, b), "div_maxguard")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / denom, a.shape))
        if b.requires_grad:
            live = b.data > eps
            b._accumulate(_unbroadcast(-g * a.data / (denom * denom) * live, b.shape))

    out._backward = _bw
    return out


def absolute(a) -> Tensor:
    """|a| with the subgradient convention d|x|/dx = 0 at exactly x = 0."""
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), (a,), "abs")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * np.sign(a.data))

    out._backward = _bw
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data), (a,), "softplus")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * expit(a.data))

    out._backward = _bw
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    out = Tensor(s, (a,), "sigmoid")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * s * (1.0 - s))

    out._backward = _bw
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data, (a,), "square")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * 2.0 * a.data)

    out._backward = _bw
    return out


def sqrt_guarded(a, eps=1e-24) -> Tensor:
    """sqrt(a + eps) for nonnegative a; the guard bounds the gradient at 0."""
    a = as_tensor(a)
    root = np.sqrt(a.data + eps)
    out = Tensor(root, (a,), "sqrt")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * 0.5 / root)

    out._backward = _bw
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient flows to the attaining argument, ties to a."""
    a, b = _binary(a, b, "minimum")
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b), "minimum")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    out._backward = _bw
    return out


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), "reduce_sum")

    def _bw():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = _bw
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(a, b) -> Tensor:
    """Scalar inner product of two equally sized tensors (flattened)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.size != b.size:
        raise ShapeError(f"dot: size mismatch {a.shape} vs {b.shape}")
    out = Tensor(np.dot(a.data.ravel(), b.data.ravel()), (a, b), "dot")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g * b.data.reshape(a.shape))
        if b.requires_grad:
            b._accumulate(g * a.data.reshape(b.shape))

    out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = _bw
    return out


def dense(x, weight, bias) -> Tensor:
    """Per-row affine map: out[n, :] = x[n, :] @ weight + bias."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} vs weight {weight.shape}")
    return add(matmul(x, weight), bias)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T.copy(), (a,), "transpose")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad.T)

    out._backward = _bw
    return out


def flip(a, axis) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.flip(a.data, axis=axis).copy(), (a,), "flip")

    def _bw():
        if a.requires_grad:
            a._accumulate(np.flip(out.grad, axis=axis))

    out._backward = _bw
    return out


def concat(a, b, axis=0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.concatenate([a.data, b.data], axis=axis), (a, b), "concat")
    split = a.shape[axis]

    def _bw():
        g = out.grad
        sl_a = [slice(None)] * g.ndim
        sl_a[axis] = slice(0, split)
        sl_b = [slice(None)] * g.ndim
        sl_b[axis] = slice(split, None)
        if a.requires_grad:
            a._accumulate(g[tuple(sl_a)])
        if b.requires_grad:
            b._accumulate(g[tuple(sl_b)])

    out._backward = _bw
    return out


def narrow(a, axis, start, length) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy(), (a,), "narrow")

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[sl] = out.grad
            a._accumulate(g)

    out._backward = _bw
    return out


def unfold_time(a, width) -> Tensor:
    """Sliding windows along axis 0: out[m, j, ...] = a[m + j, ...]."""
    a = as_tensor(a)
    if a.shape[0] < width:
        raise ShapeError(f"unfold_time: {a.shape[0]} rows < width {width}")
    view = np.lib.stride_tricks.sliding_window_view(a.data, width, axis=0)
    out = Tensor(np.moveaxis(view, -1, 1).copy(), (a,), "unfold")
    m = a.shape[0] - width + 1

    def _bw():
        if not a.requires_grad:
            return
        g = np.zeros_like(a.data)
        for j in range(width):
            g[j : j + m] += out.grad[:, j]
        a._accumulate(g)

    out._backward = _bw
    return out


def _strided_frames(x, n, h):
    """All length-n frames of 1-D x at hop h (a view, not a copy)."""
    return np.lib.stride_tricks.sliding_window_view(x, n)[::h]


def _overlap_add(rows, h, out_len):
    """Scatter rows[n, :] into a length-out_len signal at offsets n*h."""
    t, n = rows.shape
    out = np.zeros(out_len)
    for c in range(n):
        out[c : c + h * t : h] += rows[:, c]
    return out


def _check_conv_args(filters, stride):
    if filters.data.ndim != 2:
        raise ShapeError(f"filters must be 2-D, got {filters.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")


def conv1d(signal, filters, stride) -> Tensor:
    """Strided cross-correlation: out[n, k] = sum_t signal[n*h + t] * filters[k, t].

    Differentiable with respect to both the signal and the filter taps;
    the signal gradient is the exact overlap-add adjoint.
    """
    signal, filters = as_tensor(signal), as_tensor(filters)
    _check_conv_args(filters, stride)
    if signal.data.ndim != 1:
        raise ShapeError(f"signal must be 1-D, got {signal.shape}")
    length, n = signal.size, filters.shape[1]
    if length < n:
        raise InputTooShortError(f"signal length {length} < filter length {n}")
    frames = _strided_frames(signal.data, n, stride)
    out = Tensor(frames @ filters.data.T, (signal, filters), "conv1d")

    def _bw():
        g = out.grad
        if signal.requires_grad:
            signal._accumulate(_overlap_add(g @ filters.data, stride, length))
        if filters.requires_grad:
            filters._accumulate(g.T @ frames)

    out._backward = _bw
    return out


def transposed_conv1d(grid, filters, stride) -> Tensor:
    """Overlap-add synthesis: out[m] = sum_{n,k} grid[n, k] * filters[k, m - n*h].

    Exact adjoint of ``conv1d`` with the same filters and stride.
    """
    grid, filters = as_tensor(grid), as_tensor(filters)
    _check_conv_args(filters, stride)
    if grid.data.ndim != 2 or grid.size == 0:
        raise ShapeError(f"grid must be a nonempty 2-D tensor, got {grid.shape}")
    if grid.shape[1] != filters.shape[0]:
        raise ConfigError(
            f"grid has {grid.shape[1]} channels but filterbank has {filters.shape[0]} filters"
        )
    t, n = grid.shape[0], filters.shape[1]
    out_len = (t - 1) * stride + n
    out = Tensor(
        _overlap_add(grid.data @ filters.data, stride, out_len),
        (grid, filters),
        "transposed_conv1d",
    )

    def _bw():
        g = out.grad
        g_frames = _strided_frames(g, n, stride)
        if grid.requires_grad:
            grid._accumulate(g_frames @ filters.data.T)
        if filters.requires_grad:
            filters._accumulate(grid.data.T @ g_frames)

    out._backward = _bw
    return out


def _toposort(root):
    order, visited = [], set()
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


def backward(root: Tensor):
    """Populate gradients of every reachable grad-requiring node.

    The root must be scalar-valued.  Each node is visited exactly once,
    in reverse topological order; gradients accumulate additively, so
    callers must zero stale gradients between passes.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def zero_grads(tensors):
    for t in tensors:
        node = t.node if isinstance(t, Parameter) else t
        node.grad = None


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    delta: float = 1e-6
    tol: float = 1e-5

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def ok(self):
        return self.max_rel_err < self.tol

    def failures(self):
        return [e for e in self.entries if e.max_rel_err >= self.tol]


def grad_check(f, params, delta=1e-6, tol=1e-5, sample=None, seed=0, rel_floor=1e-6):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must be a deterministic zero-argument callable that rebuilds the
    scalar graph from the current parameter values.  ``sample`` limits the
    probe to that many randomly chosen coordinates per parameter (seeded),
    which keeps large-tensor checks affordable.  Nondifferentiable points
    (e.g. |x| at exactly 0) are the caller's responsibility to avoid.
    """
    named = []
    for i, p in enumerate(params):
        if isinstance(p, Parameter):
            named.append((p.name, p.node))
        else:
            named.append((f"param{i}", p))

    for _, node in named:
        node.grad = None
        node.requires_grad = True
    root = f()
    backward(root)
    analytic = {name: (np.zeros_like(node.data) if node.grad is None else node.grad.copy())
                for name, node in named}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(delta=delta, tol=tol)
    for name, node in named:
        flat = node.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = rng.choice(flat.size, size=sample, replace=False)
        max_rel = max_abs = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + delta
            f_plus = float(f().data)
            flat[i] = keep - delta
            f_minus = float(f().data)
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * delta)
            ad = analytic[name].reshape(-1)[i]
            abs_err = abs(fd - ad)
            rel_err = abs_err / max(abs(fd), abs(ad), rel_floor)
            max_rel = max(max_rel, rel_err)
            max_abs = max(max_abs, abs_err)
        report.entries.append(GradCheckEntry(name, max_rel, max_abs, len(idx)))
    return report
