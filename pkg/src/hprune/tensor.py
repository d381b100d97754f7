"""Dense tensors with a reverse-mode gradient tape.

Every op records a closure on its output when any input requires grad.
``Tensor.backward`` walks the reachable nodes in reverse creation order,
so each node is visited exactly once and shared subgraphs accumulate.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_DEBUG = False

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug(flag: bool) -> None:
    """In debug mode every op rejects non-finite inputs."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr is data and isinstance(data, np.ndarray):
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_counter)

    # -- basic properties -------------------------------------------------

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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="expected a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- backward ---------------------------------------------------------

    def backward(self, grad=None) -> None:
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="root must be a scalar")
        if not self.requires_grad:
            raise RuntimeError("backward: root does not require grad")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._id, reverse=True)

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        grads = {self._id: seed}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operator sugar ---------------------------------------------------

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(op: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._id = next(_counter)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
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
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# -- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("add", a, b)
    if _DEBUG:
        _check_finite("add", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("sub", a, b)
    if _DEBUG:
        _check_finite("sub", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("mul", a, b)
    if _DEBUG:
        _check_finite("mul", a.data, b.data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("div", a, b)
    if _DEBUG:
        _check_finite("div", a.data, b.data)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    p = float(exponent)
    if _DEBUG:
        _check_finite("power", a.data)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("power", a.data**p, (a,), backward)


# -- elementwise unary ----------------------------------------------------


def _unary(op: str, a: Tensor, fwd: np.ndarray, local: Callable[[], np.ndarray]) -> Tensor:
    def backward(g):
        return (g * local(),)

    return _make(op, fwd, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    if _DEBUG:
        _check_finite("sigmoid", a.data)
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _unary("sigmoid", a, out, lambda: out * (1.0 - out))


def tanh(a: Tensor) -> Tensor:
    if _DEBUG:
        _check_finite("tanh", a.data)
    out = np.tanh(a.data)
    return _unary("tanh", a, out, lambda: 1.0 - out * out)


def relu(a: Tensor) -> Tensor:
    if _DEBUG:
        _check_finite("relu", a.data)
    mask = a.data > 0
    return _unary("relu", a, np.where(mask, a.data, 0.0).astype(a.data.dtype), lambda: mask)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    if _DEBUG:
        _check_finite("gelu", a.data)
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + _GELU_C * x2))
    out = 0.5 * x * (1.0 + t)

    def local():
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner

    return _unary("gelu", a, out, local)


def exp(a: Tensor) -> Tensor:
    if _DEBUG:
        _check_finite("exp", a.data)
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda: out)


def log(a: Tensor) -> Tensor:
    if _DEBUG:
        _check_finite("log", a.data)
    return _unary("log", a, np.log(a.data), lambda: 1.0 / a.data)


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    if _DEBUG:
        _check_finite("sqrt", a.data)
    out = np.sqrt(a.data)

    def local():
        safe = np.where(out > 0, out, 1.0)
        return np.where(out > 0, 0.5 / safe, 0.0)

    return _unary("sqrt", a, out, local)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    if _DEBUG:
        _check_finite("softplus", a.data)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def local():
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return _unary("softplus", a, out, local)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 strictly inside, 0 at or beyond the bounds."""
    if _DEBUG:
        _check_finite("clamp", a.data)
    x = a.data
    out = np.clip(x, lo, hi) if (lo is not None or hi is not None) else x.copy()
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return _unary("clamp", a, out, lambda: inside)


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), backward)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), or batched (...,m,k)@(...,k,n) with identical batch extents."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="no broadcasting; reshape explicitly")
    if _DEBUG:
        _check_finite("matmul", a.data, b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


bmm = matmul


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,) -> (B, C_out, T_out)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv1d", w.shape, b.shape, detail="bias must be (C_out,)")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    B, C, T = x.shape
    O, _, K = w.shape
    if T < K:
        raise ShapeError("conv1d", x.shape, w.shape, detail=f"length {T} shorter than kernel {K}")
    if _DEBUG:
        _check_finite("conv1d", x.data, w.data)
    T_out = (T - K) // stride + 1
    # cols[b, t, c, k] = x[b, c, t*stride + k]
    xc = np.ascontiguousarray(x.data)
    sb, sc, st = xc.strides
    cols = np.lib.stride_tricks.as_strided(
        xc, shape=(B, T_out, C, K), strides=(sb, st * stride, sc, st), writeable=False
    ).reshape(B * T_out, C * K)
    wmat = w.data.reshape(O, C * K)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, T_out, O).transpose(0, 2, 1).copy()

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * T_out, O)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(O, C, K)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, T_out, C, K)
            gx = np.zeros_like(x.data)
            span = stride * (T_out - 1) + 1
            for k in range(K):
                gx[:, :, k : k + span : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make("conv1d", out, parents, backward)


# -- normalisation / softmax ---------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if _DEBUG:
        _check_finite("softmax", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    if _DEBUG:
        _check_finite("log_softmax", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply the learnable affine map."""
    D = x.shape[-1]
    if weight.shape != (D,) or bias.shape != (D,):
        raise ShapeError("layer_norm", x.shape, weight.shape, bias.shape)
    if _DEBUG:
        _check_finite("layer_norm", x.data, weight.data, bias.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def backward(g):
        gx = gw = gb = None
        lead = tuple(range(g.ndim - 1))
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * weight.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gw, gb

    return _make("layer_norm", out, (x, weight, bias), backward)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
    inv = np.argsort(axes)
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("getitem", a.shape, detail=str(exc)) from None
    basic = _is_basic_index(index)
    out = np.array(out, copy=True) if basic else out

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _make("getitem", out, (a,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError("concat", *(t.shape for t in tensors), detail=f"axis={axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make("concat", out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim + 1
    axis = axis % nd
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)
