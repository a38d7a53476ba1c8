"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order and
accumulates into leaf ``grad`` arrays.

Precision is a per-thread setting (``precision("single")`` / ``precision("double")``);
ops never promote, so mixing dtypes raises :class:`PrecisionError`.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

EPS_LOG = 1e-8

_DTYPES = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    pass


class PrecisionError(TypeError):
    pass


class DomainError(ValueError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True
        self.counter: Optional["FlopCounter"] = None
        self.scope: list[str] = []


_state = _State()


@contextmanager
def precision(mode: str):
    """Run the enclosed computation in ``single`` or ``double`` precision."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    prev = _state.dtype
    _state.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = prev


def default_dtype() -> type:
    return _state.dtype


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    """Accumulates FLOPs issued by ops, keyed by the active scope path."""

    def __init__(self) -> None:
        self.by_scope: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def add(self, flops: int) -> None:
        self.by_scope["/".join(_state.scope)] += int(flops)


@contextmanager
def count_flops():
    prev = _state.counter
    counter = FlopCounter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def flop_scope(name: str):
    _state.scope.append(name)
    try:
        yield
    finally:
        _state.scope.pop()


def _count(flops: int) -> None:
    if _state.counter is not None:
        _state.counter.add(flops)


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _state.dtype, copy=True)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

    # ------------------------------------------------------------------ info
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}, op={self._op})"

    # ------------------------------------------------------------- backward
    def backward(self, grad: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar.

        Gradients accumulate across calls; pass ``retain_graph=True`` to call
        backward on the same graph more than once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is _RELEASED:
                raise RuntimeError("graph already released; use retain_graph=True")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._backward = _RELEASED
                node._parents = ()

    # ------------------------------------------------------------ operators
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
        return pow_elem(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, axes, "sum", keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, axes, "mean", keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce(self, axes, "max", keepdims)

    def min(self, axes=None, keepdims=False):
        return reduce(self, axes, "min", keepdims)


def _released(*_):  # pragma: no cover - sentinel
    raise RuntimeError("graph already released")


_RELEASED = _released


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _check_dtypes(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise PrecisionError(f"mixed precision: {dt} vs {t.dtype}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out._op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the dimensions that broadcasting stretched to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor, tuple[int, ...]]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = as_tensor(a, like), as_tensor(b, like)
    _check_dtypes(a, b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from exc
    return a, b, shape


# ---------------------------------------------------------------- arithmetic
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    out = a.data + b.data
    _count(out.size)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    out = a.data - b.data
    _count(out.size)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    out = a.data * b.data
    _count(out.size)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    denom = b.data
    out = a.data / denom
    _count(out.size)

    def backward(g):
        ga = unbroadcast(g / denom, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / denom, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    out = -a.data
    return _make(out, (a,), lambda g: (-g,), "neg")


def pow_elem(base: ArrayLike, exponent: ArrayLike) -> Tensor:
    """Elementwise ``base ** exponent`` differentiable in both arguments.

    The base must be non-negative; callers clamp it away from zero first.
    The log factor of the exponent gradient is floored at ``EPS_LOG``.
    """
    base, exponent, shape = _binary_operands(base, exponent)
    if np.any(base.data < 0):
        raise DomainError("pow_elem requires a non-negative base")
    out = np.power(base.data, exponent.data)
    _count(out.size)

    def backward(g):
        gb = ge = None
        if base.requires_grad:
            gb = unbroadcast(g * exponent.data * np.power(base.data, exponent.data - 1), base.shape)
        if exponent.requires_grad:
            logb = np.log(np.maximum(base.data, EPS_LOG))
            ge = unbroadcast(g * out * logb, exponent.shape)
        return gb, ge

    return _make(out, (base, exponent), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _count(out.size)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    out = np.log(x)
    _count(out.size)
    return _make(out, (a,), lambda g: (g / x,), "log")


def absolute(a: Tensor) -> Tensor:
    x = a.data
    out = np.abs(x)
    _count(out.size)
    return _make(out, (a,), lambda g: (g * np.sign(x),), "abs")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    x = a.data
    out = np.clip(x, lo, hi)
    _count(out.size)

    def backward(g):
        mask = np.ones(x.shape, dtype=bool)
        if lo is not None:
            mask &= x >= lo
        if hi is not None:
            mask &= x <= hi
        return (g * mask,)

    return _make(out, (a,), backward, "clamp")


# --------------------------------------------------------------- activations
def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(a: Tensor, kind: str) -> Tensor:
    x = a.data
    _count(x.size)
    if kind == "relu":
        mask = x > 0
        out = x * mask
        return _make(out, (a,), lambda g: (g * mask,), "relu")
    if kind == "sigmoid":
        out = _sigmoid(x)
        return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")
    if kind == "tanh":
        out = np.tanh(x)
        return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")
    if kind == "softplus":
        out = np.logaddexp(0, x).astype(x.dtype, copy=False)
        return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")
    if kind in ("none", "identity", None):
        return a
    raise ValueError(f"unknown activation {kind!r}")


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    return activation(a, "tanh")


def softplus(a: Tensor) -> Tensor:
    return activation(a, "softplus")


# ----------------------------------------------------------------- reshaping
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; backward scatters into zeros."""
    out = a.data[index]
    if out.ndim and any(d < 1 for d in out.shape):
        raise ShapeError(f"index {index!r} produced an empty tensor")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    _check_dtypes(*tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shapes differ off axis {axis}: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tensors, backward, "concat")


# ---------------------------------------------------------------- reductions
def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({ax % ndim for ax in axes})) if ndim else tuple(axes)
    if not axes:
        raise ShapeError("reduce needs at least one axis")
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
    return axes


def reduce(a: Tensor, axes=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with ``max``, ``min``, ``mean`` or ``sum``.

    max/min route the gradient to the first attaining element, i.e. the
    lowest flat index within each reduced group.
    """
    x = a.data
    if isinstance(axes, (tuple, list)) and len(axes) == 0:
        raise ShapeError("reduce needs at least one axis")
    axes = _norm_axes(axes, x.ndim)
    _count(x.size)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    if kind in ("sum", "mean"):
        out = x.sum(axis=axes, keepdims=True)
        n = int(np.prod([x.shape[i] for i in axes]))
        if kind == "mean":
            out = out / x.dtype.type(n)
        scale = 1.0 if kind == "sum" else 1.0 / n

        def backward(g):
            g = g.reshape(kept_shape)
            return (np.broadcast_to(g * x.dtype.type(scale), x.shape).copy(),)

    elif kind in ("max", "min"):
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = np.transpose(x, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1) if kind == "max" else flat.argmin(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)
        out = out.reshape(tuple(x.shape[i] for i in rest))
        out = out.reshape(kept_shape)
        inverse = np.argsort(rest + axes)

        def backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            return (np.transpose(gflat.reshape(moved.shape), inverse),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    if not keepdims:
        out = out.reshape(tuple(d for i, d in enumerate(x.shape) if i not in axes))
    return _make(out, (a,), backward, kind)


# ------------------------------------------------------------- convolutions
def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    dx = np.zeros(padded_shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    return dx


def _conv2d_backward(g, x_shape, xp_shape, cols, wmat, w_shape, k, stride, padding, ho, wo, need):
    """Return (dx, dw, db) for an im2col convolution."""
    n = x_shape[0]
    cout = w_shape[0]
    g2 = g.reshape(n, cout, ho * wo)
    need_x, need_w, need_b = need
    dx = dw = db = None
    if need_w:
        gt = g2.transpose(1, 0, 2).reshape(cout, -1)
        ct = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
        dw = (gt @ ct.T).reshape(w_shape)
    if need_b:
        db = g2.sum(axis=(0, 2))
    if need_x:
        dcols = np.matmul(wmat.T, g2)
        if k == 1 and stride == 1 and padding == 0:
            dx = dcols.reshape(x_shape)
        else:
            dxp = _col2im(dcols, xp_shape, k, stride, ho, wo)
            h, w = x_shape[2:]
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
    return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*tensors)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh != kw:
        raise ShapeError("conv2d supports square kernels only")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    k = kh
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    _count(2 * cin * cout * k * k * ho * wo)
    if k == 1 and stride == 1 and padding == 0:
        xp = x.data
        cols = x.data.reshape(n, cin, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    xp_shape = xp.shape
    need = (x.requires_grad, weight.requires_grad, bias is not None and bias.requires_grad)

    def backward(g):
        dx, dw, db = _conv2d_backward(g, x.shape, xp_shape, cols, wmat, weight.shape, k, stride, padding, ho, wo, need)
        return (dx, dw) if bias is None else (dx, dw, db)

    return _make(out, tensors, backward, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample expects a 4-d tensor, got {x.shape}")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(out), (x,), backward, "upsample")


# ----------------------------------------------------------------- helpers
def zeros(shape: Iterable[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=_state.dtype))


def ones(shape: Iterable[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape), dtype=_state.dtype))


def ones_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.ones_like(t.data))
