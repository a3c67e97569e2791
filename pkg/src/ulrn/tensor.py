"""Dense tensors over numpy with define-by-run reverse-mode autodiff.

Every primitive records a closure that maps the output gradient to input
gradients. ``backward`` sorts the recorded graph topologically and pushes
gradients from the root to the leaves, accumulating into ``Tensor.grad`` on
leaf tensors that require it.

Broadcasting is restricted to leading-axis expansion: an operand of shape
``s`` combines with one of shape ``(..., *s)``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (float32 or float64)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Run a block without recording operations for backward."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode autodiff needs.

    ``data`` is always a C-contiguous floating array. ``grad`` is ``None``
    until a backward pass reaches the tensor, then an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_inputs", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True, order="C")
        if 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._inputs: tuple = ()
        self._backward = None
        self._op = "leaf"

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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _leaf(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("division is only defined by a Python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _leaf(arr: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = requires_grad
    t.grad = None
    t.name = None
    t._inputs = ()
    t._backward = None
    t._op = "leaf"
    return t


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _leaf(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE), False)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _make(arr: np.ndarray, inputs: tuple, backward_fn, op: str) -> Tensor:
    _check_finite(arr, op)
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    t = _leaf(arr, needs)
    t._op = op
    if needs:
        t._inputs = inputs
        t._backward = backward_fn
    return t


def _lead_shape(a: tuple, b: tuple, op: str) -> tuple:
    """Result shape when one operand's shape is a suffix of the other's."""
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading-axis expansion")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _lead_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _lead_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _lead_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` with ``b[k, n]`` or ``b[..., k, n]`` (same leading dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(np.matmul(ad, bd), (a, b), bw, "matmul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _make(x.data * pos, (x,), bw, "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NumericError("log of a non-positive value")

    def bw(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), bw, "log")


def _masked(xd: np.ndarray, mask):
    if mask is None:
        return xd
    return np.where(mask, xd, -np.inf)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, True = keep) zeroes blocked entries."""
    z = _masked(x.data.astype(np.float64), mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, mask=None) -> Tensor:
    """Max-subtracted log-softmax over the last axis."""
    if mask is not None:
        raise ContractError("log_softmax does not support masking")
    xd = x.data.astype(np.float64)
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - lse).astype(x.dtype)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def embedding(weight: Tensor, idx) -> Tensor:
    """Gather rows of ``weight[V, d]`` at integer positions ``idx``."""
    idx = np.asarray(idx)
    if weight.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {weight.shape}")
    if idx.dtype.kind not in "iu":
        raise ContractError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {weight.shape[0]} rows")
    V, d = weight.shape

    def bw(g):
        gw = np.zeros((V, d), dtype=g.dtype)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, d))
        return (gw,)

    return _make(weight.data[idx], (weight,), bw, "embedding")


def gather_last(x: Tensor, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]``; picks one entry per row of the last axis."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} != {x.shape[:-1]}")
    ii = idx[..., None]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, ii, g[..., None], axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.data, ii, axis=-1)[..., 0], (x,), bw, "gather_last")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv64 = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * inv64
    inv = inv64.astype(x.dtype)
    xhat = xhat64.astype(x.dtype)
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    out = (xhat64 * gd + bias.data).astype(x.dtype)
    return _make(out, (x, gain, bias), bw, "layer_norm")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc

    def bw(g):
        return (g.reshape(src),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw, "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


class Graph:
    """Topologically ordered view of the operations leading to ``root``.

    ``nodes`` lists tensors so that every tensor appears after all of its
    inputs. ``records`` gives ``(op, input ids, output id)`` per recorded op.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))

    @property
    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [
            (t._op, tuple(id(p) for p in t._inputs), id(t))
            for t in self.nodes
            if t._backward is not None
        ]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if root.size != 1 or root.ndim != 0:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor that requires grad")
    graph = Graph(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                _check_finite(g, "backward")
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._inputs, t._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(
    f: Callable[..., Tensor],
    point: Sequence[Tensor],
    step: float | None = None,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The gap per coordinate is ``|a - n| / max(1, |a|, |n|)``. With
    ``max_checks`` only that many coordinates per tensor are probed, chosen
    deterministically from ``seed``.
    """
    point = list(point)
    if step is None:
        step = 1e-3 if all(t.dtype == np.float32 for t in point) else 1e-5
    for t in point:
        t.grad = None
        t.requires_grad = True
    out = f(*point)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in point]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(point, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in coords:
                orig = flat[i]
                hi = flat.dtype.type(orig + step)
                lo = flat.dtype.type(orig - step)
                flat[i] = hi
                fp = float(f(*point).data)
                flat[i] = lo
                fm = float(f(*point).data)
                flat[i] = orig
                numeric = (fp - fm) / (float(hi) - float(lo))
                an = float(a.reshape(-1)[i])
                err = abs(an - numeric) / max(1.0, abs(an), abs(numeric))
                worst = max(worst, err)
    for t in point:
        t.grad = None
    return worst
