"""N-d arrays with nominal dtypes and the primitive forward operations.

Payloads are float32 (int32 for I32) numpy arrays; every primitive computes
in binary32 and quantizes its result through the output's nominal dtype, so a
tensor's values always sit on its format's grid.  Reductions and matrix
products accumulate *stepwise*: each partial sum is quantized, which is what
makes float16 ``sum``/``mean`` genuinely overflow-prone and the full-precision
escape hatch observable.

Non-finite values propagate silently through every op (x/0 -> inf, inf-inf ->
NaN, ...); detecting them is the job of ``tree.all_finite``, never of the ops.

When a trace is active (see ``tracing``), every primitive records itself on
the innermost tape; that machinery is driven by the autodiff module.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .dtypes import (
    DType,
    F32,
    I32,
    Scalar,
    promote,
    promote_with_scalar,
    quantize_array,
)

_MAX_I32 = 2**31 - 1
_MIN_I32 = -(2**31)


class Tensor:
    """Immutable n-d array with a nominal dtype.

    Construct through :func:`tensor` (which quantizes arbitrary data onto the
    dtype's grid); the constructor itself trusts its payload.
    """

    __slots__ = ("payload", "dtype")

    def __init__(self, payload: np.ndarray, dtype: DType):
        payload.setflags(write=False)
        self.payload = payload
        self.dtype = dtype

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape

    @property
    def ndim(self) -> int:
        return self.payload.ndim

    @property
    def size(self) -> int:
        return self.payload.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return self.payload.item()

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.value}{list(self.shape)} {np.array2string(self.payload, threshold=8)})"

    # arithmetic sugar; plain Python numbers enter as weak scalars
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype: DType = F32) -> Tensor:
    """Build a tensor from array-like data, quantized onto the dtype's grid."""
    if dtype.is_float:
        return Tensor(quantize_array(np.asarray(data, dtype=np.float32), dtype), dtype)
    arr = np.asarray(data, dtype=np.int64)
    if arr.size and (arr.max() > _MAX_I32 or arr.min() < _MIN_I32):
        raise ValueError("value out of 32-bit signed integer range")
    return Tensor(arr.astype(np.int32), dtype)


def zeros(shape, dtype: DType = F32) -> Tensor:
    if dtype.is_float:
        return Tensor(np.zeros(shape, dtype=np.float32), dtype)
    return Tensor(np.zeros(shape, dtype=np.int32), dtype)


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape, t.dtype)


def ones(shape, dtype: DType = F32) -> Tensor:
    if dtype.is_float:
        return Tensor(np.ones(shape, dtype=np.float32), dtype)
    return Tensor(np.ones(shape, dtype=np.int32), dtype)


def bytes_of(t: Tensor) -> int:
    """Analytic memory footprint of a tensor at its nominal precision."""
    return t.size * t.dtype.byte_width


# ---------------------------------------------------------------------------
# Tracing hooks.  The autodiff module pushes a tape here; primitives record
# onto the innermost one.  Thread-local so concurrent traces stay private.
# ---------------------------------------------------------------------------

_TRACE = threading.local()


def _stack() -> list:
    stack = getattr(_TRACE, "stack", None)
    if stack is None:
        stack = []
        _TRACE.stack = stack
    return stack


@contextmanager
def tracing(tape):
    """Record every primitive applied in this block onto ``tape``."""
    stack = _stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextmanager
def no_trace():
    """Temporarily disable recording (used by backward rules)."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _record(op: str, inputs: tuple, out: Tensor, **aux):
    stack = _stack()
    if stack and stack[-1] is not None:
        stack[-1].record(op, inputs, out, aux)


# ---------------------------------------------------------------------------
# Elementwise primitives.
# ---------------------------------------------------------------------------

def _as_operand(x):
    if isinstance(x, (Tensor, Scalar)):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Scalar(float(x))
    raise TypeError(f"cannot use {type(x).__name__} as an operand")


def _require_float(t: Tensor, op: str):
    if not t.dtype.is_float:
        raise TypeError(f"{op} requires float tensors, got {t.dtype.value}")


def _gelu_kernel(x):
    c0 = np.float32(0.7978845608028654)  # sqrt(2/pi)
    c1 = np.float32(0.044715)
    inner = c0 * (x + c1 * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


_BINARY_KERNELS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}

_UNARY_KERNELS = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "relu": lambda x: np.maximum(x, np.float32(0.0)),
    "gelu": _gelu_kernel,
}


def _binary(op: str, a, b) -> Tensor:
    a = _as_operand(a)
    b = _as_operand(b)
    if isinstance(a, Tensor):
        _require_float(a, op)
    if isinstance(b, Tensor):
        _require_float(b, op)
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        out_dtype = promote(a.dtype, b.dtype)
    elif isinstance(a, Tensor):
        out_dtype = promote_with_scalar(a.dtype, b)
    elif isinstance(b, Tensor):
        out_dtype = promote_with_scalar(b.dtype, a)
    else:
        raise TypeError(f"{op} needs at least one tensor operand")
    pa = a.payload if isinstance(a, Tensor) else np.float32(a.value)
    pb = b.payload if isinstance(b, Tensor) else np.float32(b.value)
    with np.errstate(all="ignore"):
        raw = _BINARY_KERNELS[op](pa, pb)
        out = Tensor(quantize_array(raw, out_dtype), out_dtype)
    _record(op, (a, b), out)
    return out


def _unary(op: str, a: Tensor) -> Tensor:
    if not isinstance(a, Tensor):
        raise TypeError(f"{op} expects a tensor")
    _require_float(a, op)
    with np.errstate(all="ignore"):
        raw = _UNARY_KERNELS[op](a.payload)
        out = Tensor(quantize_array(raw, a.dtype), a.dtype)
    _record(op, (a,), out)
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def div(a, b) -> Tensor:
    return _binary("div", a, b)


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a)


def exp(a: Tensor) -> Tensor:
    return _unary("exp", a)


def log(a: Tensor) -> Tensor:
    return _unary("log", a)


def sqrt(a: Tensor) -> Tensor:
    return _unary("sqrt", a)


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a)


def gelu(a: Tensor) -> Tensor:
    return _unary("gelu", a)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "gelu": gelu,
}


def elementwise(op_code: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op_code not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_code!r}")
    if op_code in _BINARY_KERNELS:
        if b is None:
            raise TypeError(f"{op_code} is binary")
        return _ELEMENTWISE[op_code](a, b)
    if b is not None:
        raise TypeError(f"{op_code} is unary")
    return _ELEMENTWISE[op_code](a)


# ---------------------------------------------------------------------------
# Stepwise-quantized accumulation helpers (shared by reductions, matmul, and
# the fused ops' internals).
# ---------------------------------------------------------------------------

def _stepwise_sum(arr: np.ndarray, axis: int, dtype: DType, keepdims: bool = False) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    n = moved.shape[0]
    if n == 0:
        acc = np.zeros(moved.shape[1:], dtype=np.float32)
    else:
        acc = np.asarray(moved[0], dtype=np.float32)
        for i in range(1, n):
            acc = quantize_array(acc + moved[i], dtype)
    if keepdims:
        acc = np.expand_dims(acc, axis)
    return acc


def _stepwise_mean(arr: np.ndarray, axis: int, dtype: DType, keepdims: bool = False) -> np.ndarray:
    n = arr.shape[axis]
    s = _stepwise_sum(arr, axis, dtype, keepdims)
    return quantize_array(s / np.float32(n), dtype)


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce(op_code: str, a: Tensor, axis: int | None = None) -> Tensor:
    """sum / mean / max with stepwise quantized accumulation in a's dtype."""
    if op_code not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {op_code!r}")
    if not isinstance(a, Tensor):
        raise TypeError("reduce expects a tensor")
    _require_float(a, op_code)
    arr = a.payload
    if axis is None:
        arr = arr.reshape(-1)
        ax = 0
    else:
        ax = _normalize_axis(axis, a.ndim, op_code)
    n = arr.shape[ax]
    with np.errstate(all="ignore"):
        if op_code == "sum":
            res = _stepwise_sum(arr, ax, a.dtype)
        elif op_code == "mean":
            if n == 0:
                raise ValueError("mean over an empty axis")
            res = _stepwise_mean(arr, ax, a.dtype)
        else:
            if n == 0:
                raise ValueError("max over an empty axis")
            res = np.max(arr, axis=ax)
    out = Tensor(np.asarray(res, dtype=np.float32), a.dtype)
    _record(op_code, (a,), out, axis=None if axis is None else ax)
    return out


# ---------------------------------------------------------------------------
# Matrix product.
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with each dot-product accumulation quantized stepwise.

    Follows numpy semantics: 1-d operands are promoted to a row/column and the
    extra axis is dropped again; leading batch dimensions broadcast.
    """
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise TypeError("matmul expects tensors")
    _require_float(a, "matmul")
    _require_float(b, "matmul")
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul does not accept 0-d tensors")
    pa = a.payload[None, :] if a.ndim == 1 else a.payload
    pb = b.payload[:, None] if b.ndim == 1 else b.payload
    if pa.shape[-1] != pb.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out_dtype = promote(a.dtype, b.dtype)
    lead = np.broadcast_shapes(pa.shape[:-2], pb.shape[:-2])
    out_shape = lead + (pa.shape[-2], pb.shape[-1])
    k_extent = pa.shape[-1]
    with np.errstate(all="ignore"):
        if k_extent == 0:
            acc = np.zeros(out_shape, dtype=np.float32)
        else:
            acc = None
            for k in range(k_extent):
                term = quantize_array(pa[..., :, k : k + 1] * pb[..., k : k + 1, :], out_dtype)
                term = np.broadcast_to(term, out_shape)
                acc = term if acc is None else quantize_array(acc + term, out_dtype)
    if a.ndim == 1:
        acc = np.squeeze(acc, axis=-2)
    if b.ndim == 1:
        acc = np.squeeze(acc, axis=-1)
    out = Tensor(np.asarray(acc, dtype=np.float32), out_dtype)
    _record("matmul", (a, b), out)
    return out


# ---------------------------------------------------------------------------
# Fused neural-net ops.  Each is a single primitive on the tape, but its
# internals run through the same stepwise-quantized helpers, so e.g. a
# float16 layernorm really can overflow in its mean.
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along ``axis``, in a's dtype."""
    if not isinstance(a, Tensor):
        raise TypeError("softmax expects a tensor")
    _require_float(a, "softmax")
    ax = _normalize_axis(axis, a.ndim, "softmax")
    d = a.dtype
    with np.errstate(all="ignore"):
        m = np.max(a.payload, axis=ax, keepdims=True)
        shifted = quantize_array(a.payload - m, d)
        e = quantize_array(np.exp(shifted), d)
        s = _stepwise_sum(e, ax, d, keepdims=True)
        res = quantize_array(e / s, d)
    out = Tensor(res, d)
    _record("softmax", (a,), out, axis=ax)
    return out


def _softmax_probs(arr: np.ndarray, axis: int, dtype: DType) -> np.ndarray:
    # same internals as softmax, for backward-rule recomputation
    with np.errstate(all="ignore"):
        m = np.max(arr, axis=axis, keepdims=True)
        shifted = quantize_array(arr - m, dtype)
        e = quantize_array(np.exp(shifted), dtype)
        s = _stepwise_sum(e, axis, dtype, keepdims=True)
        return quantize_array(e / s, dtype)


_LAYERNORM_EPS = 1e-5


def _layernorm_internals(arr: np.ndarray, dtype: DType):
    """Quantized mean/variance pipeline; returns (xhat, std)."""
    with np.errstate(all="ignore"):
        mean = _stepwise_mean(arr, -1, dtype, keepdims=True)
        centered = quantize_array(arr - mean, dtype)
        sq = quantize_array(centered * centered, dtype)
        var = _stepwise_mean(sq, -1, dtype, keepdims=True)
        std = quantize_array(np.sqrt(quantize_array(var + np.float32(_LAYERNORM_EPS), dtype)), dtype)
        xhat = quantize_array(centered / std, dtype)
    return xhat, std


def layernorm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """(a - mean)/sqrt(var + 1e-5) * gain + bias over the last axis."""
    for t in (a, gain, bias):
        if not isinstance(t, Tensor):
            raise TypeError("layernorm expects tensors")
        _require_float(t, "layernorm")
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("layernorm over an empty axis")
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"gain/bias must have shape ({n},)")
    d = promote(promote(a.dtype, gain.dtype), bias.dtype)
    with np.errstate(all="ignore"):
        xhat, _ = _layernorm_internals(np.asarray(a.payload, np.float32), d)
        res = quantize_array(quantize_array(xhat * gain.payload, d) + bias.payload, d)
    out = Tensor(res, d)
    _record("layernorm", (a, gain, bias), out)
    return out


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-softmax of the true class, in the logits' dtype."""
    if not (isinstance(logits, Tensor) and isinstance(labels, Tensor)):
        raise TypeError("cross_entropy expects tensors")
    _require_float(logits, "cross_entropy")
    if labels.dtype is not I32:
        raise TypeError("labels must be an I32 tensor")
    if logits.ndim != 2:
        raise ValueError("logits must be 2-d (batch, classes)")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels must have shape ({batch},)")
    lab = labels.payload
    if lab.size and (lab.min() < 0 or lab.max() >= classes):
        raise ValueError("label out of range")
    d = logits.dtype
    with np.errstate(all="ignore"):
        arr = logits.payload
        m = np.max(arr, axis=1, keepdims=True)
        shifted = quantize_array(arr - m, d)
        e = quantize_array(np.exp(shifted), d)
        s = _stepwise_sum(e, 1, d, keepdims=True)
        lse = quantize_array(np.log(s), d)
        true_shifted = shifted[np.arange(batch), lab][:, None]
        nll = quantize_array(lse - true_shifted, d)
        res = _stepwise_mean(nll.reshape(-1), 0, d)
    out = Tensor(np.asarray(res, dtype=np.float32), d)
    _record("cross_entropy", (logits, labels), out)
    return out


# ---------------------------------------------------------------------------
# Structural ops.
# ---------------------------------------------------------------------------

def cast(a: Tensor, dtype: DType) -> Tensor:
    """Re-quantize a float tensor onto another float dtype's grid."""
    if not isinstance(a, Tensor):
        raise TypeError("cast expects a tensor")
    _require_float(a, "cast")
    if not dtype.is_float:
        raise ValueError("cast target must be a float dtype")
    out = Tensor(quantize_array(a.payload, dtype), dtype)
    _record("cast", (a,), out, dtype=dtype)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    if not isinstance(a, Tensor):
        raise TypeError("reshape expects a tensor")
    out = Tensor(np.reshape(a.payload, shape), a.dtype)
    _record("reshape", (a,), out, shape=tuple(out.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if not isinstance(a, Tensor):
        raise TypeError("transpose expects a tensor")
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    out = Tensor(np.transpose(a.payload, axes), a.dtype)
    _record("transpose", (a,), out, axes=axes)
    return out
