"""Minimal reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps an ndarray; every differentiable primitive records a
closure that propagates gradients to its parents. ``backward()`` runs the
tape in reverse topological order. Training uses float32; gradient tests
switch to float64 via ``default_dtype``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "UnknownPrimitiveError",
    "StaleGraphError",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "apply_primitive",
    "PRIMITIVES",
    "finite_diff_check",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# plain python floats: numpy float64 scalars would upcast float32 operands
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Input shapes incompatible with the requested primitive."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class UnknownPrimitiveError(KeyError):
    pass


class StaleGraphError(RuntimeError):
    """Backward was called through a tape that has already been consumed."""


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype newly created tensors use."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; ops return constant tensors."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of trailing-axis broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _check_broadcast(primitive: str, a: np.ndarray, b: np.ndarray) -> None:
    """Allow equal shapes, scalars, and trailing-suffix broadcasts only."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    tail = big.shape[big.ndim - small.ndim:]
    for s, t in zip(small.shape, tail):
        if s != t and s != 1 and t != 1:
            raise ShapeError(primitive, f"shapes {a.shape} and {b.shape} do not broadcast")


class Tensor:
    """Dense n-d array with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._consumed = False

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._backward = None
        t._parents = ()
        t._consumed = False
        return t

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        # grads already flow in the working dtype; aliasing the incoming array
        # is safe because accumulation always rebinds rather than mutates
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse pass from a scalar root; each tape node runs exactly once."""
        if self.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {self.shape}")
        if self._consumed:
            raise StaleGraphError("graph already consumed; run a new forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._parents and node._consumed:
                raise StaleGraphError("graph already consumed; run a new forward pass")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            if node._parents:
                node._consumed = True
                node._backward = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out._consumed = False
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a.data, b.data)
    out = _make(a.data + b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a.data, b.data)
    out = _make(a.data - b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a.data, b.data)
    out = _make(a.data * b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a.data, b.data)
    out = _make(a.data / b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = backward
    return out


def scalar_mul(a: Tensor, s: float) -> Tensor:
    a = _lift(a)
    s = float(s)
    out = _make(a.data * np.asarray(s, dtype=a.dtype), (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    out._backward = backward
    return out


# -- structural ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with equal leading dims, or an n-d input against a 2-d weight."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", f"needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError("matmul", f"incompatible {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(a.data.swapaxes(-1, -2) @ g)

    out._backward = backward
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", f"axes {axes} not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inv))

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", f"{a.shape} -> {shape}: {e}") from None
    out = _make(data, (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError("concat", f"cannot concat {[t.shape for t in tensors]} on axis {axis}")
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, None)
    sizes = [t.shape[axis] for t in tensors]

    def backward():
        start = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(start, start + s)
                t._accumulate(out.grad[tuple(idx)])
            start += s

    out._backward = backward
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _lift(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("slice", f"[{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make(np.ascontiguousarray(a.data[idx]), (a,), None)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a._accumulate(g)

    out._backward = backward
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError("broadcast", f"{a.shape} -> {shape}: {e}") from None
    out = _make(data, (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))

    out._backward = backward
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: (V, d) table gathered by an int index array."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding-lookup", f"table must be 2-d, got {table.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.shape[0]:
        raise ShapeError("embedding-lookup", f"ids out of range for table of {table.shape[0]} rows")
    out = _make(table.data[ids], (table,), None)

    def backward():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table._accumulate(g)

    out._backward = backward
    return out


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / count)

    out._backward = backward
    return out


def l2norm(a: Tensor, axis: int, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    a = _lift(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    out = _make(norm if keepdims else norm.reshape([s for i, s in enumerate(a.shape) if i != axis % a.data.ndim]), (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            a._accumulate(g * a.data / norm)

    out._backward = backward
    return out


# -- nonlinearities ----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    out = _make(np.maximum(a.data, 0), (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0))

    out._backward = backward
    return out


def gelu(a: Tensor) -> Tensor:
    a = _lift(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = _make(a.data * cdf, (a,), None)

    def backward():
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(out.grad * (cdf + a.data * pdf))

    out._backward = backward
    return out


def softplus(a: Tensor) -> Tensor:
    a = _lift(a)
    out = _make(np.logaddexp(np.asarray(0, dtype=a.dtype), a.data), (a,), None)

    def backward():
        if a.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-a.data))
            a._accumulate(out.grad * sig)

    out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _make(p, (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad
            a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    out._backward = backward
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _make(shifted - lse, (a,), None)
    p = np.exp(out.data)

    def backward():
        if a.requires_grad:
            g = out.grad
            a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


# -- normalization layers as primitives --------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift per channel."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer-norm", f"gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    out._backward = backward
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    eps: float = 1e-5,
    training: bool = True,
) -> Tensor:
    """Batch norm over axis 0 of a (rows, features) tensor.

    In training mode batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the buffers are frozen and
    used directly.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.data.ndim != 2:
        raise ShapeError("batch-norm", f"expects (rows, features), got {x.shape}")
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)
    m = x.shape[0]

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                x._accumulate(inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).sum(axis=0) / m))
            else:
                x._accumulate(gx * inv)

    out._backward = backward
    return out


# -- losses ------------------------------------------------------------------


def soft_cross_entropy(logits: Tensor, targets, axis: int = -1) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits)); targets are constants."""
    logits = _lift(logits)
    targets = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError("cross-entropy-with-soft-targets",
                         f"targets {targets.shape} != logits {logits.shape}")
    logp = log_softmax(logits, axis=axis)
    per_row = tsum(mul(logp, Tensor(-targets)), axis=axis)
    return tmean(per_row)


def cross_entropy_hard(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a 1-based class index."""
    logits = _lift(logits)
    k = logits.shape[-1]
    if logits.data.ndim != 1:
        raise ShapeError("cross-entropy", f"expects a logit vector, got {logits.shape}")
    if not 1 <= label <= k:
        raise ValueError(f"label {label} out of range 1..{k}")
    onehot = np.zeros(k, dtype=logits.dtype)
    onehot[label - 1] = 1.0
    return tsum(mul(log_softmax(logits), Tensor(-onehot)))


# -- primitive registry ------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": narrow,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "layer-norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "softplus": softplus,
    "l2-norm": l2norm,
    "mean": tmean,
    "sum": tsum,
    "broadcast": broadcast_to,
    "embedding-lookup": embedding,
    "batch-norm": batch_norm,
    "cross-entropy-with-soft-targets": soft_cross_entropy,
}


def apply_primitive(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch one catalog primitive by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive '{op}'") from None
    return fn(*inputs, **(attrs or {}))


# -- gradient oracle ----------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 regardless of the ambient default. The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    with default_dtype(np.float64):
        xt = Tensor(x, requires_grad=True)
        out = f(xt)
        if not np.isfinite(out.data).all():
            raise ValueError("f(x) is not finite")
        out.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

        flat = x.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += epsilon
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] -= 2 * epsilon
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (hi - lo) / (2 * epsilon)
        numeric = numeric.reshape(x.shape)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
