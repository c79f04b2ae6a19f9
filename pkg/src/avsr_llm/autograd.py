"""Dense tensors with tape-based reverse-mode differentiation.

Every op records a closure on the output tensor that pushes the output
gradient back to its parents.  ``backward`` walks the recorded graph in
reverse topological order.  Storage is a numpy array; the dtype (float32 or
float64) is chosen per run via :func:`set_default_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An op argument is outside its valid range."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (empty mask, zero power, ...)."""


class ContractError(RuntimeError):
    """API used outside its contract (non-scalar backward, stale cache, ...)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

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
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor
        that requires grad.  Without ``grad`` the tensor must be a scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = b if isinstance(b, Tensor) else _lift(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = b
        return _make(a.data * s, (a,), lambda g: ((a, g * s),))
    if not isinstance(a, Tensor):
        return mul(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def reciprocal(a: Tensor) -> Tensor:
    data = 1.0 / a.data
    return _make(data, (a,), lambda g: ((a, -g * data * data),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: ((a, g * data),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: ((a, g * pos),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        return ((a, g * (sig * (1.0 + a.data * (1.0 - sig)))),)

    return _make(data, (a,), backward)


# -- reductions and shape ops ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(data, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: ((a, g.transpose(inv)),))


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return ((a, full),)

    return _make(np.array(data, copy=True), (a,), backward)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return out

    return _make(data, tensors, backward)


def pad_stack(tensors: Sequence[Tensor], length: int | None = None) -> Tensor:
    """Stack [T_i, ...] tensors into [B, T_max, ...], zero-padding at the end."""
    tensors = list(tensors)
    length = length or max(t.shape[0] for t in tensors)
    tail = tensors[0].shape[1:]
    data = np.zeros((len(tensors), length) + tail, dtype=tensors[0].dtype)
    for i, t in enumerate(tensors):
        data[i, : t.shape[0]] = t.data

    def backward(g):
        return [(t, g[i, : t.shape[0]]) for i, t in enumerate(tensors)]

    return _make(data, tensors, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ParameterError(f"ids outside [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, full),)

    return _make(table.data[ids], (table,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    # a batch of rows times one weight matrix runs as a single 2-D product
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        data = a.data @ b.data

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(data, (a, b), backward)


# -- fused nonlinear blocks --------------------------------------------------

def softmax(x: Tensor, axis: int = -1, tau: float = 1.0) -> Tensor:
    """``exp(x/tau - max) / sum`` along ``axis``."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = x.data / tau if tau != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = p * (g - (g * p).sum(axis=axis, keepdims=True))
        return ((x, gx / tau if tau != 1.0 else gx),)

    return _make(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = x.data / tau if tau != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        gx = g - p * g.sum(axis=axis, keepdims=True)
        return ((x, gx / tau if tau != 1.0 else gx),)

    return _make(out, (x,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale-only normalisation over the last axis."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * weight.data

    def backward(g):
        gw = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return ((x, gx), (weight, gw))

    return _make(out, (x, weight), backward)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved channel pairs of ``x[..., T, D]`` by position angles.

    ``cos``/``sin`` have shape [T, D/2].  The map is orthogonal, so the
    backward pass is the rotation by the negated angles.
    """
    def rot(v, s):
        pairs = v.reshape(v.shape[:-1] + (-1, 2))
        v1, v2 = pairs[..., 0], pairs[..., 1]
        return np.stack([v1 * cos - v2 * s, v1 * s + v2 * cos], axis=-1).reshape(v.shape)

    return _make(rot(x.data, sin), (x,), lambda g: ((x, rot(g, -sin)),))


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask``.

    ``logits`` is [..., V]; ``targets`` and ``mask`` match its leading shape.
    Unmasked positions contribute neither to the value nor to the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ShapeError(f"targets/mask {targets.shape}/{mask.shape} do not match logits {logits.shape}")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("cross-entropy mask selects no positions")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    sel = np.flatnonzero(mask.reshape(-1))
    tsel = targets.reshape(-1)[sel]
    if tsel.min() < 0 or tsel.max() >= V:
        raise ParameterError(f"targets outside [0, {V})")
    z = flat[sel]
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(len(sel)), tsel]
    value = np.asarray(nll.sum() / n, dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(sel)), tsel] -= 1.0
        full = np.zeros_like(flat)
        full[sel] = p * (g / n)
        return ((logits, full.reshape(logits.shape)),)

    return _make(value, (logits,), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x.data``.

    Uses only forward evaluations, so it is independent of the tape.
    """
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to the largest gradient magnitude."""
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


__all__ = [
    "Tensor", "ShapeError", "ParameterError", "DegenerateInputError", "ContractError",
    "set_default_dtype", "get_default_dtype", "default_dtype", "no_grad", "grad_enabled",
    "add", "mul", "neg", "reciprocal", "exp", "log", "relu", "silu", "tsum", "mean",
    "reshape", "transpose", "getitem", "concat", "pad_stack", "embedding", "matmul",
    "softmax", "log_softmax", "rms_norm", "rotary", "masked_cross_entropy",
    "numerical_grad", "max_relative_error",
]
