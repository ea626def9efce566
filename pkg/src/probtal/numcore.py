"""Small reverse-mode autodiff over numpy arrays.

Every trainable computation in the package is written with the functions in
this module. Storage defaults to float32; reductions and gradients accumulate
in float64. Tensors are treated as immutable once built.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    # make ndarray (op) Tensor dispatch to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output in {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.op = op
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)
    # zero subgradient at the origin
    return _make(out, (x,), lambda g: (np.where(out > 0, g * 0.5 / safe, 0.0),), "sqrt")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def floor_at(x, lo: float) -> Tensor:
    """max(x, lo) with a constant floor; gradient passes where x > lo."""
    x = as_tensor(x)
    mask = x.data > lo
    out = np.where(mask, x.data, lo).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * mask,), "floor_at")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * mask,), "clip")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64) / n

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return _make(np.asarray(out).astype(x.data.dtype), (x,), bw, "mean")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data.astype(np.float64) - m), axis=axis, keepdims=True)
    out_k = (np.log(s) + m).astype(x.data.dtype)
    soft = np.exp(x.data - out_k)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return _make(out, (x,), bw, "logsumexp")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data.astype(np.float64)
    z = np.exp(z - z.max(axis=axis, keepdims=True))
    out64 = z / z.sum(axis=axis, keepdims=True)
    out = out64.astype(x.data.dtype)

    def bw(g):
        dot = np.sum(g * out64, axis=axis, keepdims=True)
        return (out64 * (g - dot),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out64 = z - lse
    soft = np.exp(out64)

    def bw(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make(out64.astype(x.data.dtype), (x,), bw, "log_softmax")


def topk_mean(x, k: int, axis: int = 0) -> Tensor:
    """Mean of the k largest entries along ``axis`` (the temporal axis by default)."""
    x = as_tensor(x)
    n = x.shape[axis]
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)
    # stable descending order: ties resolved by position
    order = np.argsort(-x.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    vals = np.take_along_axis(x.data, idx, axis=axis)
    out = (np.sum(vals, axis=axis, dtype=np.float64) / k).astype(x.data.dtype)

    def bw(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gk = np.broadcast_to(np.expand_dims(g, axis) / k, idx.shape)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    return _make(out, (x,), bw, "topk_mean")


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def conv1d(x, w, b=None) -> Tensor:
    """Temporal convolution with zero padding that keeps the length.

    x: (..., T, C_in); w: (k, C_in, C_out) with odd k; b: (C_out,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ValueError("conv1d kernel size must be odd")
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d channel mismatch: input {x.shape[-1]} vs weight {cin}")
    T = x.shape[-2]
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    cols = np.concatenate([xp[..., j:j + T, :] for j in range(k)], axis=-1)
    wm = w.data.reshape(k * cin, cout)
    out = np.matmul(cols, wm)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        gw = np.tensordot(cols, g, axes=(tuple(range(g.ndim - 1)), tuple(range(g.ndim - 1))))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(g, wm.T)
            gxp = np.zeros(xp.shape, dtype=np.float64)
            for j in range(k):
                gxp[..., j:j + T, :] += gcols[..., j * cin:(j + 1) * cin]
            gx = gxp[..., p:p + T, :]
        grads = [gx, gw.reshape(w.shape)]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw, "conv1d")


# ------------------------------------------------------------------- structure


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, xs, bw, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(out, xs, bw, "stack")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def astype(x, dtype) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.astype(dtype), (x,), lambda g: (g,), "astype")


def take(x, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), bw, "take")


# ------------------------------------------------------------------ composites


def l2_norm(x, axis: int = -1, eps: float = 1e-8, keepdims: bool = True) -> Tensor:
    """Euclidean norm clamped below at ``eps``."""
    x = as_tensor(x)
    sq = tsum(square(x), axis=axis, keepdims=keepdims)
    return sqrt(floor_at(sq, eps * eps))


def normalize(x, axis: int = -1, eps: float = 1e-8) -> Tensor:
    return div(x, l2_norm(x, axis=axis, eps=eps))


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of broadcast-compatible vectors along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    num = tsum(mul(a, b), axis=axis)
    den = mul(l2_norm(a, axis, eps, keepdims=False), l2_norm(b, axis, eps, keepdims=False))
    return div(num, den)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the mask is a constant on the tape."""
    if rng is None or rate <= 0:
        return as_tensor(x)
    keep = (rng.random(as_tensor(x).shape) >= rate).astype(default_dtype())
    return mul(x, keep / (1.0 - rate))


# ------------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar; returns float64 gradients keyed by leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = leaves.get(node, 0) + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            # accumulation always allocates, so stored arrays are never mutated
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt``; zeros for leaves not on the tape."""
    g = backward(loss)
    return [np.asarray(g.get(w, np.zeros(w.shape)), dtype=np.float64) for w in wrt]


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backward and central differences.

    ``f`` receives fresh leaf tensors (one per entry of ``x``) and must return
    a scalar. Everything is evaluated in float64. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``max_coords`` caps the
    number of coordinates probed per input (a seeded random subset).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    base = [np.array(t.data, dtype=np.float64) for t in xs]
    rng = np.random.default_rng(seed)

    with precision(np.float64):
        def evaluate(arrays):
            out = f(*[Tensor(a, requires_grad=True) for a in arrays])
            if out.data.size != 1:
                raise ValueError("grad_check needs a scalar-valued f")
            return out

        leaves = [Tensor(a, requires_grad=True) for a in base]
        out = f(*leaves)
        analytic = grad(out, leaves)

        worst = 0.0
        for i, arr in enumerate(base):
            flat = np.arange(arr.size)
            if max_coords is not None and arr.size > max_coords:
                flat = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
            for j in flat:
                plus = [a.copy() for a in base]
                minus = [a.copy() for a in base]
                plus[i].flat[j] += step
                minus[i].flat[j] -= step
                num = (evaluate(plus).item() - evaluate(minus).item()) / (2 * step)
                an = analytic[i].flat[j]
                err = abs(an - num) / max(1.0, abs(an))
                if not np.isfinite(err):
                    raise NonFiniteError("non-finite value during grad_check")
                worst = max(worst, err)
    return worst
