"""Dense numpy tensors with tape-based reverse-mode differentiation.

Only the operations the segmenter needs are provided. Every op builds a node
holding its parents and a closure that maps the output gradient to one
gradient per parent; :func:`backward` walks the nodes in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError

_grad_enabled = True

# Raise on NaN/Inf in any op output. Disabling saves a few microseconds per op.
check_finite = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(x)
    return Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), bw, "gelu")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``. ``cond`` is a constant."""
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)
    zero = np.zeros((), dtype=a.dtype)

    def bw(g):
        ga = unbroadcast(np.where(cond, g, zero), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(cond, zero, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(B, -1, -2), a.shape)
        if b.requires_grad:
            if B.ndim == 2:
                k, n = B.shape
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(A, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(A @ B, (a, b), bw, "matmul")


# -- shape ---------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {orig} to {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def permute(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return _node(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- reductions ------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(a.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ContractError("layer_norm needs eps > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs feature size {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gamma.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * G
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _node(xhat * G + beta.data, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows with ``valid`` set.

    ``logits`` is ``N x C``. When no row is valid the result is a constant
    zero with no gradient path.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"cross_entropy: target outside [0, {c})")
    if valid is None:
        weights = np.ones(n, dtype=logits.dtype)
    else:
        weights = np.asarray(valid).reshape(-1).astype(logits.dtype)
        if weights.shape[0] != n:
            raise ShapeError(f"cross_entropy: {n} logit rows but {weights.shape[0]} valid flags")
    n_valid = weights.sum()
    if n_valid == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    X = logits.data
    shifted = X - X.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, targets]
    loss = np.asarray((nll * weights).sum() / n_valid)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (weights * (g / n_valid))[:, None],)

    return _node(loss, (logits,), bw, "cross_entropy")


# -- backward ----------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- finite differences ------------------------------------------------

class Projection:
    """Scalar ``sum(weights * fn())`` for gradient checks of non-scalar ops.

    Calling it returns the projected scalar. :func:`numerical_grad` instead
    differences ``fn()`` elementwise and sums with ``math.fsum``; entries the
    perturbation leaves untouched then cancel exactly, so rounding in the
    full sum does not swamp small gradients.
    """

    def __init__(self, fn: Callable[[], Tensor], weights: np.ndarray):
        self.fn = fn
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self) -> Tensor:
        return (self.fn() * self.weights).sum()


def numerical_grad(fn: Callable[[], Tensor], tensors: Iterable[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. each tensor's data."""
    if isinstance(fn, Projection):
        def diff(plus, minus):
            return math.fsum((fn.weights * (plus - minus)).ravel())
        evaluate = fn.fn
    else:
        def diff(plus, minus):
            return plus.item() - minus.item()
        evaluate = fn
    out = []
    with no_grad():
        for t in tensors:
            flat = t.data.reshape(-1)
            g = np.zeros(flat.shape, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = evaluate().data.copy()
                flat[i] = orig - h
                fm = evaluate().data.copy()
                flat[i] = orig
                g[i] = diff(fp, fm) / (2.0 * h)
            out.append(g.reshape(t.shape))
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are zero up to finite-difference noise
    from dominating the ratio.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward grads and central differences."""
    for t in tensors:
        t.grad = None
    backward(fn())
    numeric = numerical_grad(fn, tensors, h)
    worst = 0.0
    for t, n in zip(tensors, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, float(relative_error(a, n).max(initial=0.0)))
    return worst


# -- text dump format ----------------------------------------------------

def dumps_tensor(t) -> str:
    """``shape: d0 d1 ...`` line followed by row-major values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = "shape:" + "".join(f" {d}" for d in arr.shape)
    values = " ".join(repr(float(v)) for v in arr.reshape(-1).tolist())
    return f"{header}\n{values}\n"


def loads_tensor(text: str, dtype=np.float64) -> Tensor:
    header, _, body = text.strip("\n").partition("\n")
    if not header.startswith("shape:"):
        raise ValueError(f"tensor dump must start with 'shape:', got {header[:40]!r}")
    shape = tuple(int(s) for s in header[len("shape:"):].split())
    values = np.array([float(v) for v in body.split()], dtype=dtype)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"dump declares shape {shape} but holds {values.size} values")
    return Tensor(values.reshape(shape))
