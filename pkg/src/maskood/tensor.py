"""Dense tensors with a reverse-mode gradient tape.

Values live in numpy arrays (float32 by default). Every differentiable op
records its parents and a backward closure on the output node; ``gradient``
walks the recorded graph in reverse execution order and accumulates
gradients in float64.
"""
from __future__ import annotations

import builtins
import itertools

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that stops ops from recording backward closures."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_counter)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _make(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _binary(a, b):
    # raw operands take the dtype of the tensor operand, so they neither
    # upcast float32 nor lose precision against float64
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 and b.data.ndim > 0 and not a.requires_grad:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and a.data.ndim > 0 and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data.astype(np.float64) ** 2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # branch-free stable form: exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _make(out, (a,), backward, "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def clamp(a, lo=None, hi=None, inward_grad=False) -> Tensor:
    """Clip to [lo, hi]. With ``inward_grad`` a saturated element still passes
    gradients whose descent step points back into the interval."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    below = x < lo if lo is not None else np.zeros(x.shape, dtype=bool)
    above = x > hi if hi is not None else np.zeros(x.shape, dtype=bool)
    inside = ~(below | above)

    def back(g):
        if not inward_grad:
            return (g * inside,)
        return (g * (inside | (above & (g > 0)) | (below & (g < 0))),)

    return _make(out, (a,), back, "clamp")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def max(a, axis: int, keepdims=False) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(a.shape, dtype=np.float64)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return _make(out, (a,), backward, "max")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward, "getitem")


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def linear_map(a, matrix: np.ndarray, axis: int) -> Tensor:
    """Contract a constant matrix (out x in) against one axis of ``a``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    m = np.asarray(matrix, dtype=a.dtype)
    out = np.moveaxis(np.tensordot(a.data, m, axes=([axis], [1])), -1, axis)

    def backward(g):
        return (np.moveaxis(np.tensordot(g, m, axes=([axis], [0])), -1, axis),)

    return _make(out, (a,), backward, "linear_map")


def softmax_masked(logits, axis=-1, mask=None) -> Tensor:
    """Softmax with an optional additive mask (0 or -inf entries).

    A slice whose entries are all -inf maps to the all-zero slice.
    """
    logits = as_tensor(logits)
    x = logits.data
    if np.isnan(x).any():
        raise NumericError("NaN in softmax input")
    if mask is not None:
        mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        x = x + mask.astype(x.dtype)
    m = np.max(x, axis=axis, keepdims=True)
    dead = np.isneginf(m)
    m = np.where(dead, 0, m)
    with np.errstate(invalid="ignore"):
        e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.where(dead, 0, e / np.where(dead, 1, s)).astype(x.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (logits,), backward, "softmax")


def log_softmax(logits, axis=-1) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")


# ---------------------------------------------------------------- spatial ops

def avg_pool(a, stride: int) -> Tensor:
    """Non-overlapping stride x stride patch average over the last two axes."""
    a = as_tensor(a)
    *lead, h, w = a.shape
    if h % stride or w % stride:
        raise DimensionError(f"spatial extents {h}x{w} not divisible by {stride}")
    ho, wo = h // stride, w // stride
    out = a.data.reshape(*lead, ho, stride, wo, stride).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, stride, axis=-2), stride, axis=-1)
        return (g / (stride * stride),)

    return _make(out.astype(a.dtype), (a,), backward, "avg_pool")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out x n_in), half-pixel centres, edge clamped."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = builtins.min(builtins.max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        mat[i, i0] += 1.0 - t
        mat[i, i1] += t
    return mat


def upsample_bilinear(a, size) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` = (H, W)."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    out = linear_map(a, bilinear_matrix(h, size[0]), axis=-2)
    return linear_map(out, bilinear_matrix(w, size[1]), axis=-1)


# ---------------------------------------------------------------- gradients

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack_.append((p, False))
    return order


def gradient(output: Tensor, inputs) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each input (float64)."""
    if output.data.size != 1:
        raise DimensionError("gradient needs a scalar output")
    order = _topo(output)
    on_tape = {n._id for n in order}
    for t in inputs:
        if t._id not in on_tape:
            raise GraphError(f"input {t!r} is not on the tape of the output")
    grads = {output._id: np.ones(output.shape, dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return [
        grads.get(t._id, np.zeros(t.shape, dtype=np.float64)).reshape(t.shape)
        for t in inputs
    ]


def grad_check(loss_fn, inputs, eps=1e-3, gradient_fn=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``inputs`` are arrays; they are promoted to float64 leaves for the check.
    ``gradient_fn`` overrides the analytic route (a mutation hook for tests).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in base]
    loss = loss_fn(*leaves)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    analytic = (gradient_fn or gradient)(loss, leaves)
    worst = 0.0
    for i, x in enumerate(base):
        flat = x.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            vals = []
            for step in (eps, -eps):
                flat[j] = orig + step
                probe = [Tensor(b) for b in base]
                vals.append(float(loss_fn(*probe).data))
            flat[j] = orig
            num[j] = (vals[0] - vals[1]) / (2 * eps)
        an = np.asarray(analytic[i], dtype=np.float64).reshape(-1)
        rel = np.abs(an - num) / np.maximum(1e-8, np.abs(an) + np.abs(num))
        if rel.size:
            worst = builtins.max(worst, float(rel.max()))
    return worst
