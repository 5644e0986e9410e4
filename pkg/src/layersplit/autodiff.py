"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order and accumulates gradients into every leaf that has
``requires_grad=True``.

Broadcasting is deliberately narrow: binary ops accept equal shapes, a
scalar operand, or an operand whose shape is a trailing suffix of the
other's (leading axes are added). Anything else needs an explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_DEBUG = False
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """Raise ``FloatingPointError`` on any non-finite op output when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None, op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else (), _backward=backward_fn if requires else None, op=op)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw, "pow")


def tensor_abs(a: Tensor) -> Tensor:
    """Absolute value; the gradient at exactly zero is taken as 0."""
    a = as_tensor(a)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bw, "abs")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def clamp(a: Tensor, lo: float, hi: float, straight_through: bool = False) -> Tensor:
    """Clip to ``[lo, hi]``.

    With ``straight_through`` the backward pass is the identity; otherwise
    the gradient is zeroed outside the interval.
    """
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        if straight_through:
            return (g,)
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(out, (a,), bw, "clamp")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tensor_sum(a, axes, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D or shares ``a``'s leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums back."""
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )

    def bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(a.shape),)

    return _make(np.ascontiguousarray(out), (a,), bw, "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ValueError(f"split: sizes {list(sizes)} do not sum to axis length {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


def patchify(a: Tensor, p: int) -> Tensor:
    """``(B, H, W, C)`` -> ``(B, (H/p)*(W/p), p*p*C)``, row-major patches."""
    B, H, W, C = a.shape
    if H % p or W % p:
        raise ValueError(f"patchify: spatial dims {(H, W)} not divisible by {p}")
    x = reshape(a, (B, H // p, p, W // p, p, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, (H // p) * (W // p), p * p * C))


def unpatchify(a: Tensor, p: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`patchify` for an ``h x w`` grid of patches."""
    B, N, P = a.shape
    C = P // (p * p)
    if N != h * w or C * p * p != P:
        raise ValueError(f"unpatchify: shape {a.shape} does not match grid {(h, w)} with patch {p}")
    x = reshape(a, (B, h, w, p, p, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, h * p, w * p, C))


# ---------------------------------------------------------------- fused ops

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), bw, "layer_norm")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    excluded: list[tuple[int, int]] = field(default_factory=list)
    worst: tuple[int, int] | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tol


def finite_diff_check(
    f: Callable[..., Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    kink_tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    grad_floor: float = 1e-5,
) -> GradCheckResult:
    """Compare analytic gradients of ``f(*params)`` with central differences.

    ``f`` receives one :class:`Tensor` per entry of ``params`` and must
    return a scalar tensor. Coordinates where the one-sided slopes disagree
    by more than ``kink_tol`` (relative) sit on a kink of a piecewise
    function and are reported as excluded rather than compared.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, grad_floor)``.
    Central differences carry roundoff near 1e-10 in double precision, so
    gradients smaller than ``grad_floor`` are compared absolutely; with
    the defaults this is ``|a - n| <= 1e-9 + 1e-4 * max(|a|, |n|)``.
    """
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in params]
    leaves = [Tensor(arr, requires_grad=True) for arr in arrays]
    loss = f(*leaves)
    backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value() -> float:
        return float(f(*[Tensor(arr) for arr in arrays]).data)

    f0 = value()
    coords = [(i, j) for i, arr in enumerate(arrays) for j in range(arr.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst_err, worst, excluded, checked = 0.0, None, [], 0
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        fp = value()
        flat[j] = orig - eps
        fm = value()
        flat[j] = orig
        right, left = (fp - f0) / eps, (f0 - fm) / eps
        if abs(right - left) > kink_tol * max(abs(right), abs(left), 1.0):
            excluded.append((i, j))
            continue
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), grad_floor)
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (i, j)
    return GradCheckResult(worst_err, checked, len(excluded), excluded, worst)
