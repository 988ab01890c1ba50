"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; :func:`backward` walks
the recorded graph in reverse topological order.

Broadcasting is deliberately narrow: two operands of an element-wise op must
have equal shapes, or one shape must be a trailing suffix of the other (a
scalar counts as the empty suffix). Anything else needs an explicit
:func:`expand` or :func:`reshape`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ShapeError", "NumericError", "ContractError",
    "tensor", "zeros", "ones", "default_dtype", "precision", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "relu",
    "sigmoid", "tanh", "softplus", "log_sigmoid", "sin", "cos", "absolute",
    "clip", "maximum", "minimum", "where", "sum", "mean", "max", "matmul",
    "transpose", "reshape", "expand", "take", "concat", "stack", "softmax",
    "layer_norm", "conv2d", "bilinear_sample", "upsample_nearest", "detach",
    "backward", "graph_nodes",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """NaN or infinity where a finite value is required."""


class ContractError(ValueError):
    """A precondition of an operation is violated."""


_state = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; all results are constants."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"dimension sizes must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self):
        return softmax(self)

    def detach(self):
        return detach(self)


class Parameter(Tensor):
    """A trainable leaf. Setting ``requires_grad = False`` freezes it."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_tensor(x, like: "Tensor | None" = None) -> Tensor:
    """Wrap ``x``; constants take the dtype of ``like`` when given, else the default."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _state["dtype"]
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple["Tensor", "Tensor"]:
    """Binary-op operands; a non-tensor side adopts the tensor side's dtype."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    rg = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_trailing(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond trailing-dimension expansion")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise binary ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _node(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Element-wise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _check_trailing(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def minimum(a, b) -> Tensor:
    """Element-wise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _check_trailing(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def where(mask, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    _check_trailing(a.shape, b.shape, "where")
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0), sa),
                                         _unbroadcast(np.where(mask, 0, g), sb)))


# ---------------------------------------------------------------------------
# element-wise unary ops

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,))


def power(x, p: float) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _node(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_np(x.data)
    return _node(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1 - out * out),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = _as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _node(out, (x,), lambda g: (g * _sigmoid_np(xd),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x)."""
    x = _as_tensor(x)
    xd = x.data
    out = np.minimum(xd, 0) - np.log1p(np.exp(-np.abs(xd)))
    return _node(out, (x,), lambda g: (g * _sigmoid_np(-xd),))


def sin(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _node(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _node(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    sgn = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * sgn,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def detach(x) -> Tensor:
    """A constant copy of ``x``; gradients do not flow back through it."""
    x = _as_tensor(x)
    tape = _state.get("detach_tape")
    if tape is not None:
        mode, values = tape[0], tape[1]
        if mode == "record":
            values.append(x.data.copy())
        else:
            # replay: hold the stop-gradient value at what the recorded pass saw
            return Tensor(values[tape[2]()], dtype=x.data.dtype)
    return Tensor(x.data, dtype=x.data.dtype)


@contextlib.contextmanager
def detach_tape(mode: str, values: list):
    """Record detached values (``"record"``) or substitute them in call order (``"replay"``).

    Differentiating through ``detach`` treats its output as a constant; this
    lets a finite-difference probe hold those constants fixed as well.
    """
    if mode not in ("record", "replay"):
        raise ValueError(f"unknown tape mode {mode!r}")
    counter = iter(range(len(values))) if mode == "replay" else None
    old = _state.get("detach_tape")
    _state["detach_tape"] = (mode, values, (lambda: next(counter)) if counter else None)
    try:
        yield
    finally:
        _state["detach_tape"] = old


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _node(np.asarray(out), (x,), lambda g: (np.broadcast_to(g.reshape(kshape), shape),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _node(np.asarray(out), (x,), lambda g: (np.broadcast_to(g.reshape(kshape) / n, shape),))


def max(x, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g.reshape(idx.shape), axis=axis)
        return (full,)
    return _node(out if keepdims else np.squeeze(out, axis), (x,), bw)


# ---------------------------------------------------------------------------
# structural ops

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _check_trailing(a.shape[:-2], b.shape[:-2], "matmul batch")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return _node(ad @ bd, (a, b), bw)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (x,), lambda g: (g.reshape(old),))


def expand(x, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    x = _as_tensor(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (x,), lambda g: (_unbroadcast(g, old),))


def _getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    out = x.data[idx]
    if out.ndim and 0 in out.shape:
        raise ShapeError(f"slice {idx!r} of {shape} is empty")

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)
    return _node(np.array(out), (x,), bw)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with a constant integer index array."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)
    return _node(out, (x,), bw)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ContractError("concat of an empty sequence")
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, xs[0].shape)) if i != axis):
            raise ShapeError(f"concat shapes {[t.shape for t in xs]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=axis)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)
    return _node(out, xs, bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in xs], axis)


# ---------------------------------------------------------------------------
# fused numerical kernels

def softmax(x, axis: int = -1) -> Tensor:
    """Softmax over the last dimension, stabilised by max subtraction."""
    x = _as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        raise ContractError("softmax is defined over the last dimension only")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains NaN or Inf")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _node(out, (x,), bw)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last dimension to zero mean and unit variance, then scale and shift."""
    x = _as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [x]
    out = xhat
    gd = bd = None
    if gamma is not None:
        gamma = _as_tensor(gamma)
        gd = gamma.data
        out = out * gd
        parents.append(gamma)
    if beta is not None:
        beta = _as_tensor(beta)
        bd = beta.data
        out = out + bd
        parents.append(beta)
    n = xd.shape[-1]

    def bw(g):
        gx_hat = g * gd if gd is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gd is not None:
            grads.append(_unbroadcast(g * xhat, gd.shape))
        if bd is not None:
            grads.append(_unbroadcast(g, bd.shape))
        return tuple(grads)
    del n
    return _node(out, parents, bw)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` [C_in,H,W] or [B,C_in,H,W] with ``w`` [C_out,C_in,k,k]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be [C_out, C_in, k, k] with odd k, got {w.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"input {x.shape} does not match kernel {w.shape}")
    B, C, H, W = xd.shape
    Co, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"input {x.shape} too small for kernel {k} with pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # cols: [B, Ho*Wo, C*k*k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * k * k)
    wmat = w.data.reshape(Co, C * k * k)
    out = cols @ wmat.T
    parents = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"bias shape {bias.shape} != ({Co},)")
        out = out + bias.data
        parents.append(bias)
    out = out.transpose(0, 2, 1).reshape(B, Co, Ho, Wo)

    def bw(g):
        g4 = g[None] if squeeze else g
        gm = g4.reshape(B, Co, Ho * Wo).transpose(0, 2, 1)  # [B, HoWo, Co]
        grads = []
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            grads.append(gx[0] if squeeze else gx)
        else:
            grads.append(None)
        if w.requires_grad:
            gw = np.zeros((Co, C * k * k), dtype=g.dtype)
            for b in range(B):
                gw += gm[b].T @ cols[b]
            grads.append(gw.reshape(w.shape))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(gm.sum(axis=(0, 1)))
        return tuple(grads)
    return _node(out[0] if squeeze else out, parents, bw)


def bilinear_sample(featmap, points) -> Tensor:
    """Bilinearly sample ``featmap`` [..., D, H, W] at ``points`` [..., N, 2] -> [..., N, D].

    Points are (x, y) in continuous pixel coordinates with pixel (i, j) at
    x = j, y = i. Corners that fall outside the grid contribute zero.
    """
    featmap, points = _as_tensor(featmap), _as_tensor(points)
    if points.shape[-1] != 2:
        raise ShapeError(f"points must end in a coordinate pair, got {points.shape}")
    lead = featmap.shape[:-3]
    if points.shape[:-2] != lead:
        raise ShapeError(f"batch dims differ: featmap {featmap.shape}, points {points.shape}")
    D, H, W = featmap.shape[-3:]
    nb = int(np.prod(lead)) if lead else 1
    N = points.shape[-2]
    fm = featmap.data.reshape(nb, D, H * W).transpose(0, 2, 1).reshape(nb * H * W, D)
    pts = points.data.reshape(nb, N, 2)
    px, py = pts[..., 0], pts[..., 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    base = (np.arange(nb, dtype=np.intp) * (H * W))[:, None]
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            flat = base + np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
            v = fm[flat] * valid[..., None]
            corners.append((flat, valid, v))
    (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
    wx0, wy0 = 1 - fx, 1 - fy
    out = wy0 * (wx0 * v00 + fx * v01) + fy * (wx0 * v10 + fx * v11)
    weights = (wy0 * wx0, wy0 * fx, fy * wx0, fy * fx)

    def bw(g):
        g = g.reshape(nb, N, D)
        gf = gp = None
        if featmap.requires_grad:
            acc = np.zeros((nb * H * W, D), dtype=g.dtype)
            for (flat, valid, _), wgt in zip(corners, weights):
                np.add.at(acc, flat[valid], (g * wgt)[valid])
            gf = acc.reshape(nb, H * W, D).transpose(0, 2, 1).reshape(featmap.shape)
        if points.requires_grad:
            gx = (g * (wy0 * (v01 - v00) + fy * (v11 - v10))).sum(-1)
            gy = (g * (wx0 * (v10 - v00) + fx * (v11 - v01))).sum(-1)
            gp = np.stack([gx, gy], axis=-1).reshape(points.shape)
        return gf, gp
    return _node(out.reshape(lead + (N, D)), (featmap, points), bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two dims by an integer factor."""
    x = _as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    shape = x.shape

    def bw(g):
        h, w = shape[-2:]
        return (g.reshape(shape[:-2] + (h, factor, w, factor)).sum(axis=(-3, -1)),)
    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# graph traversal

def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Fill ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaves listed in ``leaves`` that the loss does not depend on get a zero
    gradient. Existing gradients are overwritten, not accumulated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = graph_nodes(loss) if loss.requires_grad else []
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: set[int] = set()
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=node.data.dtype).reshape(node.shape)
            reached.add(id(node))
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in reached:
                leaf.grad = np.zeros_like(leaf.data)
