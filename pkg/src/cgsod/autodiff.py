"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive the networks need lives here: elementwise arithmetic,
matrix products, softmax, layer normalization, 2-D convolution, bilinear
resizing, pooling, embedding lookup and cross-entropy.  Forward values are
computed with numpy; each primitive registers a closure on the active tape
that pushes gradients back to its inputs.  Replaying a tape visits those
closures in exact reverse execution order, and a tape can be replayed only
once.

Values are checked for finiteness after every primitive; NaN or Inf raises
``NumericError`` instead of propagating silently.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, TapeError

# Tapes are per thread: a tape and its tensors belong to one logical thread,
# so independent model instances can run on separate threads.
_TLS = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives for one reverse replay.

    Use as a context manager around a forward pass::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)

    Outside any tape, primitives run without recording (inference mode).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._output_ids: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def _record(self, out: "Tensor", backward_fn) -> None:
        self._nodes.append((out, backward_fn))
        self._output_ids.add(id(out))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if self._used:
            raise TapeError(
                "tape already replayed; record a new tape before calling backward again"
            )
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        if id(loss) not in self._output_ids:
            raise TapeError("loss is not connected to this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def backward(loss: "Tensor") -> None:
    """Reverse-replay the tape that recorded ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is detached from any tape")
    loss._tape.backward(loss)


class Tensor:
    """Immutable n-d float64 array, optionally tracked for gradients.

    ``data`` is never written by primitives after construction; ``grad`` is
    the only mutated field and only accumulates during tape replay.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of this tensor cut off from any tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._tape = None
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary / reduction shorthands ------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def gelu(self):
        return gelu(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def max(self):
        return amax(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Tensor(float(value))
    raise TypeError(f"cannot use {type(value).__name__} as a tensor operand")


def _result(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result, check finiteness, record on the active tape."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._tape = tape if track else None
    if track:
        tape._record(out, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` (scalar broadcasting only)."""
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if shape == () else g.sum(axis=0).reshape(shape)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise DimensionError(
        f"{op}: shapes {a.data.shape} and {b.data.shape} do not match "
        "(only identical shapes or scalars combine elementwise)"
    )


# -- elementwise primitives ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    arr = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result("add", arr, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    arr = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result("sub", arr, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    arr = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result("mul", arr, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        arr = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result("div", arr, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _result("neg", -a.data, (a,), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power expects a python scalar exponent")
    p = float(exponent)
    with np.errstate(invalid="ignore"):
        arr = a.data**p

    def bw(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _result("power", arr, (a,), bw)


def exp(a: Tensor) -> Tensor:
    arr = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * arr)

    return _result("exp", arr, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        arr = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return _result("log", arr, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        arr = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * 0.5 / arr)

    return _result("sqrt", arr, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    arr = np.abs(a.data)

    def bw(g):
        _accumulate(a, g * np.sign(a.data))

    return _result("abs", arr, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    arr = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - arr * arr))

    return _result("tanh", arr, (a,), bw)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    arr = _sigmoid_raw(a.data)

    def bw(g):
        _accumulate(a, g * arr * (1.0 - arr))

    return _result("sigmoid", arr, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|), stable at both tails
    arr = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        _accumulate(a, g * _sigmoid_raw(a.data))

    return _result("softplus", arr, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    arr = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accumulate(a, g * local)

    return _result("gelu", arr, (a,), bw)


def relu(a: Tensor) -> Tensor:
    arr = np.maximum(a.data, 0.0)

    def bw(g):
        _accumulate(a, g * (a.data > 0.0))

    return _result("relu", arr, (a,), bw)


# -- reductions -----------------------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    arr = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _result("sum", arr, (a,), bw)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    arr = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.data.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape))

    return _result("mean", arr, (a,), bw)


def amax(a: Tensor) -> Tensor:
    """Global maximum; gradient splits evenly across tied maxima."""
    arr = a.data.max()

    def bw(g):
        mask = a.data == arr
        _accumulate(a, (float(g) / mask.sum()) * mask)

    return _result("amax", np.asarray(arr), (a,), bw)


# -- shape primitives ------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.data.shape} -> {shape}: {exc}") from None

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result("reshape", arr, (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    arr = a.data.transpose(axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inverse))

    return _result("transpose", arr, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    arr = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result("concat", arr, tuple(tensors), bw)


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis; gradient sums back over it."""
    if n < 1:
        raise DimensionError(f"expand_leading: count {n} must be positive")
    arr = np.broadcast_to(a.data, (n,) + a.data.shape).copy()

    def bw(g):
        _accumulate(a, g.sum(axis=0))

    return _result("expand_leading", arr, (a,), bw)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked inputs multiply slice-by-slice.

    For rank > 2 the leading extents must match exactly, no broadcasting.
    Gradients follow d a = g @ b^T and d b = a^T @ g per slice.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul: {a.data.shape} @ {b.data.shape}")
    arr = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _result("matmul", arr, (a, b), bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector to the last axis of ``x``."""
    if bias.data.ndim != 1 or x.data.shape[-1] != bias.data.shape[0]:
        raise DimensionError(
            f"add_bias: input {x.data.shape} incompatible with bias {bias.data.shape}"
        )
    arr = x.data + bias.data

    def bw(g):
        _accumulate(x, g)
        _accumulate(bias, g.reshape(-1, bias.data.shape[0]).sum(axis=0))

    return _result("add_bias", arr, (x, bias), bw)


# -- neural-network primitives ---------------------------------------------


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if x.data.ndim == 0 or x.data.shape[-1] < 1:
        raise DimensionError(f"softmax_last: need a non-empty last axis, got {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_last: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    arr = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * arr).sum(axis=-1, keepdims=True)
        _accumulate(x, arr * (g - dot))

    return _result("softmax_last", arr, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    c = x.data.shape[-1] if x.data.ndim else 0
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"layer_norm: input {x.data.shape} needs gamma/beta of shape ({c},), "
            f"got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    arr = xhat * gamma.data + beta.data

    def bw(g):
        _accumulate(beta, g.reshape(-1, c).sum(axis=0))
        _accumulate(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _result("layer_norm", arr, (x, gamma, beta), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """2-D convolution of a (C_in, H, W) map with (C_out, C_in, kh, kw) filters."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv2d: need (C,H,W) input and (O,C,kh,kw) weight, got "
            f"{x.data.shape} and {weight.data.shape}"
        )
    c_in, h, w = x.data.shape
    c_out, wc_in, kh, kw = weight.data.shape
    if wc_in != c_in:
        raise DimensionError(f"conv2d: input channels {c_in} != weight channels {wc_in}")
    if bias.data.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: input {h}x{w} (padding {padding}) smaller than one {kh}x{kw} patch"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c_in, kh, kw, oh, ow), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, a : a + oh * stride : stride, b : b + ow * stride : stride]
    cols2 = cols.reshape(c_in * kh * kw, oh * ow)
    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    arr = (w2 @ cols2 + bias.data[:, None]).reshape(c_out, oh, ow)

    def bw(g):
        g2 = g.reshape(c_out, oh * ow)
        _accumulate(bias, g2.sum(axis=1))
        _accumulate(weight, (g2 @ cols2.T).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c_in, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, a : a + oh * stride : stride, b : b + ow * stride : stride] += dcols[:, a, b]
            _accumulate(x, dxp[:, padding : padding + h, padding : padding + w])

    return _result("conv2d", arr, (x, weight, bias), bw)


def _resize_axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source taps for one axis (align-corners false)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize of a (C, h, w) array; shared forward kernel."""
    c, h, w = x.shape
    y0, y1, wy = _resize_axis_coords(h, out_h)
    x0, x1, wx = _resize_axis_coords(w, out_w)
    v00 = x[:, y0[:, None], x0[None, :]]
    v01 = x[:, y0[:, None], x1[None, :]]
    v10 = x[:, y1[:, None], x0[None, :]]
    v11 = x[:, y1[:, None], x1[None, :]]
    # lerp form keeps constants exact and stays inside the tap bounds
    top = v00 + wx[None, None, :] * (v01 - v00)
    bot = v10 + wx[None, None, :] * (v11 - v10)
    return top + wy[None, :, None] * (bot - top)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear interpolation of a (C, h, w) map."""
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize: need (C,h,w), got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    c, h, w = x.data.shape
    if h < 1 or w < 1:
        raise DimensionError(f"bilinear_resize: empty input {x.data.shape}")
    arr = bilinear_resize_array(x.data, out_h, out_w)

    def bw(g):
        y0, y1, wy = _resize_axis_coords(h, out_h)
        x0, x1, wx = _resize_axis_coords(w, out_w)
        wyg = wy[None, :, None]
        wxg = wx[None, None, :]
        dtop = g * (1.0 - wyg)
        dbot = g * wyg
        dx = np.zeros_like(x.data)
        ci = np.arange(c)[:, None, None]
        yy0 = y0[None, :, None]
        yy1 = y1[None, :, None]
        xx0 = x0[None, None, :]
        xx1 = x1[None, None, :]
        np.add.at(dx, (ci, yy0, xx0), dtop * (1.0 - wxg))
        np.add.at(dx, (ci, yy0, xx1), dtop * wxg)
        np.add.at(dx, (ci, yy1, xx0), dbot * (1.0 - wxg))
        np.add.at(dx, (ci, yy1, xx1), dbot * wxg)
        _accumulate(x, dx)

    return _result("bilinear_resize", arr, (x,), bw)


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean-pool a (C, h, w) map onto an out_h x out_w grid of windows."""
    if x.data.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool2d: need (C,h,w), got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"adaptive_avg_pool2d: target {out_h}x{out_w} must be positive")
    c, h, w = x.data.shape
    rows = [(i * h // out_h, -(-(i + 1) * h // out_h)) for i in range(out_h)]
    colsb = [(j * w // out_w, -(-(j + 1) * w // out_w)) for j in range(out_w)]
    arr = np.empty((c, out_h, out_w), dtype=np.float64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(colsb):
            arr[:, i, j] = x.data[:, r0:r1, c0:c1].mean(axis=(1, 2))

    def bw(g):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(colsb):
                area = (r1 - r0) * (c1 - c0)
                dx[:, r0:r1, c0:c1] += g[:, i : i + 1, j : j + 1] / area
        _accumulate(x, dx)

    return _result("adaptive_avg_pool2d", arr, (x,), bw)


def embedding_lookup(weight: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a (V, D) table; gradients scatter-add into those rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"embedding_lookup: ids must be 1-d, got shape {idx.shape}")
    v = weight.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ContractError(f"embedding_lookup: id out of range for table of {v} rows")
    arr = weight.data[idx]

    def bw(g):
        if weight.requires_grad:
            dw = np.zeros_like(weight.data)
            np.add.at(dw, idx, g)
            _accumulate(weight, dw)

    return _result("embedding_lookup", arr, (weight,), bw)


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Per-row negative log-likelihood of ``targets`` under row softmax."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_rows: need (T,V) logits, got {logits.data.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    t, v = logits.data.shape
    if idx.shape != (t,):
        raise DimensionError(f"cross_entropy_rows: {t} rows vs {idx.shape} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ContractError(f"cross_entropy_rows: target id out of range for {v} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    arr = lse - shifted[np.arange(t), idx]

    def bw(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(t), idx] -= 1.0
        _accumulate(logits, soft * g[:, None])

    return _result("cross_entropy_rows", arr, (logits,), bw)


# -- oracles ----------------------------------------------------------------


def finite_diff_gradient(f, x: Tensor, step: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``.

    Independent of the tape: evaluations run on scratch tapes that are
    discarded, so calling this inside a recorded forward pass is safe.
    """
    if step <= 0:
        raise ContractError(f"finite_diff_gradient: step must be positive, got {step}")
    flat = x.data.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        with Tape():
            hi = f(Tensor((flat + bump).reshape(x.data.shape)))
        with Tape():
            lo = f(Tensor((flat - bump).reshape(x.data.shape)))
        if not isinstance(hi, Tensor) or hi.data.size != 1 or lo.data.size != 1:
            raise ContractError("finite_diff_gradient: f must return a scalar tensor")
        grad[i] = (hi.item() - lo.item()) / (2.0 * step)
    return Tensor(grad.reshape(x.data.shape))


def gradient_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6
) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
