"""Reverse-mode differentiation of functions from a parameter tree to a scalar.

Tracing a function records every primitive on a Tape; walking the tape
backwards propagates cotangents computed with the same quantized tensor ops
as the forward pass, so gradients exhibit the identical half-precision
overflow/underflow behaviour.  The seed cotangent is 1 in the loss's dtype,
and each backward step works in the promoted dtype of the node it flows
through.

Only float tensor leaves of the params tree receive gradients; every other
leaf gets a ``None`` marker.  The args tree is never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .dtypes import quantize_array
from .tensors import Tensor, bytes_of
from .tree import tree_map


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    aux: dict


@dataclass
class Tape:
    """Topologically ordered record of primitive applications."""

    entries: list = field(default_factory=list)

    def record(self, op, inputs, output, aux):
        self.entries.append(TapeEntry(op, inputs, output, aux))

    def activation_bytes(self) -> int:
        """Analytic footprint of every forward intermediate on the tape."""
        return sum(bytes_of(e.output) for e in self.entries)

    def replay(self):
        """Re-run every entry and check it reproduces the recorded output bit
        for bit (quantization included)."""
        with T.no_trace():
            for e in self.entries:
                redone = _REPLAY[e.op](e)
                a = redone.payload
                b = e.output.payload
                if a.dtype != b.dtype or a.shape != b.shape:
                    raise AssertionError(f"replay of {e.op} changed shape/dtype")
                if not np.array_equal(
                    np.asarray(a).view(np.uint32).reshape(-1) if a.dtype == np.float32 else a,
                    np.asarray(b).view(np.uint32).reshape(-1) if b.dtype == np.float32 else b,
                ):
                    raise AssertionError(f"replay of {e.op} diverged")


_REPLAY = {
    "add": lambda e: T.add(*e.inputs),
    "sub": lambda e: T.sub(*e.inputs),
    "mul": lambda e: T.mul(*e.inputs),
    "div": lambda e: T.div(*e.inputs),
    "neg": lambda e: T.neg(e.inputs[0]),
    "exp": lambda e: T.exp(e.inputs[0]),
    "log": lambda e: T.log(e.inputs[0]),
    "sqrt": lambda e: T.sqrt(e.inputs[0]),
    "relu": lambda e: T.relu(e.inputs[0]),
    "gelu": lambda e: T.gelu(e.inputs[0]),
    "matmul": lambda e: T.matmul(*e.inputs),
    "sum": lambda e: T.reduce("sum", e.inputs[0], axis=e.aux["axis"]),
    "mean": lambda e: T.reduce("mean", e.inputs[0], axis=e.aux["axis"]),
    "max": lambda e: T.reduce("max", e.inputs[0], axis=e.aux["axis"]),
    "softmax": lambda e: T.softmax(e.inputs[0], axis=e.aux["axis"]),
    "layernorm": lambda e: T.layernorm(*e.inputs),
    "cross_entropy": lambda e: T.cross_entropy(*e.inputs),
    "cast": lambda e: T.cast(e.inputs[0], e.aux["dtype"]),
    "reshape": lambda e: T.reshape(e.inputs[0], e.aux["shape"]),
    "transpose": lambda e: T.transpose(e.inputs[0], e.aux["axes"]),
}


# ---------------------------------------------------------------------------
# Backward rules.  Each takes (entry, cotangent) and yields (input_index,
# contribution) pairs; contributions are built from the quantized tensor ops,
# so they live on the same precision grids as the forward values.
# ---------------------------------------------------------------------------

def _unbroadcast(c: Tensor, shape: tuple) -> Tensor:
    """Sum a cotangent down to the shape of a broadcast operand."""
    while c.ndim > len(shape):
        c = T.reduce("sum", c, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and c.shape[ax] != 1:
            target = c.shape[:ax] + (1,) + c.shape[ax + 1 :]
            c = T.reshape(T.reduce("sum", c, axis=ax), target)
    return c


def _expand(c: Tensor, shape: tuple, axis) -> Tensor:
    """Broadcast a reduced cotangent back along the reduced axis (exact)."""
    arr = c.payload
    if axis is not None:
        arr = np.expand_dims(arr, axis)
    arr = np.broadcast_to(arr, shape)
    return Tensor(arr, c.dtype)


def _bw_add(e, c):
    out = []
    for i in (0, 1):
        if isinstance(e.inputs[i], Tensor):
            out.append((i, _unbroadcast(c, e.inputs[i].shape)))
    return out


def _bw_sub(e, c):
    out = []
    if isinstance(e.inputs[0], Tensor):
        out.append((0, _unbroadcast(c, e.inputs[0].shape)))
    if isinstance(e.inputs[1], Tensor):
        out.append((1, _unbroadcast(T.neg(c), e.inputs[1].shape)))
    return out


def _bw_mul(e, c):
    a, b = e.inputs
    out = []
    if isinstance(a, Tensor):
        out.append((0, _unbroadcast(T.mul(c, b), a.shape)))
    if isinstance(b, Tensor):
        out.append((1, _unbroadcast(T.mul(c, a), b.shape)))
    return out


def _bw_div(e, c):
    a, b = e.inputs
    out = []
    if isinstance(a, Tensor):
        out.append((0, _unbroadcast(T.div(c, b), a.shape)))
    if isinstance(b, Tensor):
        g = T.neg(T.div(T.mul(c, a), T.mul(b, b)))
        out.append((1, _unbroadcast(g, b.shape)))
    return out


def _bw_neg(e, c):
    return [(0, T.neg(c))]


def _bw_exp(e, c):
    return [(0, T.mul(c, e.output))]


def _bw_log(e, c):
    return [(0, T.div(c, e.inputs[0]))]


def _bw_sqrt(e, c):
    return [(0, T.div(T.mul(c, 0.5), e.output))]


def _bw_relu(e, c):
    mask = Tensor((e.inputs[0].payload > 0).astype(np.float32), c.dtype)
    return [(0, T.mul(c, mask))]


def _bw_gelu(e, c):
    x = e.inputs[0].payload
    c0 = np.float32(0.7978845608028654)
    c1 = np.float32(0.044715)
    with np.errstate(all="ignore"):
        inner = c0 * (x + c1 * x * x * x)
        t = np.tanh(inner)
        sech2 = np.float32(1.0) - t * t
        deriv = np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * x * sech2 * c0 * (
            np.float32(1.0) + np.float32(3.0) * c1 * x * x
        )
        deriv = quantize_array(deriv, c.dtype)
    return [(0, T.mul(c, Tensor(deriv, c.dtype)))]


def _swap_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return T.transpose(t, axes)


def _bw_matmul(e, c):
    a, b = e.inputs
    A = T.reshape(a, (1,) + a.shape) if a.ndim == 1 else a
    B = T.reshape(b, b.shape + (1,)) if b.ndim == 1 else b
    lead = np.broadcast_shapes(A.shape[:-2], B.shape[:-2])
    C = T.reshape(c, lead + (A.shape[-2], B.shape[-1]))
    ga = _unbroadcast(T.matmul(C, _swap_last(B)), A.shape)
    gb = _unbroadcast(T.matmul(_swap_last(A), C), B.shape)
    if a.ndim == 1:
        ga = T.reshape(ga, a.shape)
    if b.ndim == 1:
        gb = T.reshape(gb, b.shape)
    return [(0, ga), (1, gb)]


def _bw_sum(e, c):
    x = e.inputs[0]
    return [(0, _expand(c, x.shape, e.aux["axis"]))]


def _bw_mean(e, c):
    x = e.inputs[0]
    axis = e.aux["axis"]
    n = x.size if axis is None else x.shape[axis]
    return [(0, T.div(_expand(c, x.shape, axis), n))]


def _bw_max(e, c):
    x = e.inputs[0]
    axis = e.aux["axis"]
    m = _expand(e.output, x.shape, axis)
    cb = _expand(c, x.shape, axis)
    with np.errstate(all="ignore"):
        mask = x.payload == m.payload
        counts = mask.sum(axis=axis, keepdims=axis is not None).astype(np.float32)
        raw = cb.payload * mask / counts  # gradient splits equally among ties
        contrib = Tensor(quantize_array(raw, c.dtype), c.dtype)
    return [(0, contrib)]


def _bw_softmax(e, c):
    y = e.output
    ax = e.aux["axis"]
    d = c.dtype
    t1 = T.mul(c, y)
    with np.errstate(all="ignore"):
        s = Tensor(T._stepwise_sum(t1.payload, ax, d, keepdims=True), d)
    return [(0, T.mul(y, T.sub(c, s)))]


def _bw_layernorm(e, c):
    x, gain, bias = e.inputs
    d = e.output.dtype
    with np.errstate(all="ignore"):
        xhat_arr, std_arr = T._layernorm_internals(np.asarray(x.payload, np.float32), d)
    xhat = Tensor(xhat_arr, d)
    std = Tensor(std_arr, d)
    cotg = T.mul(c, gain)
    with np.errstate(all="ignore"):
        m1 = Tensor(T._stepwise_mean(cotg.payload, -1, d, keepdims=True), d)
        m2_in = T.mul(cotg, xhat)
        m2 = Tensor(T._stepwise_mean(m2_in.payload, -1, d, keepdims=True), d)
    dx = T.div(T.sub(T.sub(cotg, m1), T.mul(xhat, m2)), std)
    dgain = T.mul(c, xhat)
    dbias = c
    while dgain.ndim > 1:
        dgain = T.reduce("sum", dgain, axis=0)
    while dbias.ndim > 1:
        dbias = T.reduce("sum", dbias, axis=0)
    return [(0, dx), (1, dgain), (2, dbias)]


def _bw_cross_entropy(e, c):
    logits, labels = e.inputs
    d = logits.dtype
    batch, classes = logits.shape
    with np.errstate(all="ignore"):
        p = T._softmax_probs(logits.payload, 1, d)
        onehot = np.zeros((batch, classes), dtype=np.float32)
        onehot[np.arange(batch), labels.payload] = 1.0
        diff = quantize_array(p - onehot, d)
        scaled = quantize_array(diff * c.payload, d)
        contrib = quantize_array(scaled / np.float32(batch), d)
    return [(0, Tensor(contrib, d))]


def _bw_cast(e, c):
    return [(0, T.cast(c, e.inputs[0].dtype))]


def _bw_reshape(e, c):
    return [(0, T.reshape(c, e.inputs[0].shape))]


def _bw_transpose(e, c):
    axes = e.aux["axes"]
    inverse = tuple(np.argsort(axes))
    return [(0, T.transpose(c, inverse))]


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": _bw_neg,
    "exp": _bw_exp,
    "log": _bw_log,
    "sqrt": _bw_sqrt,
    "relu": _bw_relu,
    "gelu": _bw_gelu,
    "matmul": _bw_matmul,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "max": _bw_max,
    "softmax": _bw_softmax,
    "layernorm": _bw_layernorm,
    "cross_entropy": _bw_cross_entropy,
    "cast": _bw_cast,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
}


def _backward(tape: Tape, loss: Tensor) -> dict:
    """Cotangent for every tensor reachable from the loss, keyed by id."""
    cots = {id(loss): T.ones((), loss.dtype)}
    with T.no_trace():
        for e in reversed(tape.entries):
            c = cots.pop(id(e.output), None)
            if c is None:
                continue
            for idx, contrib in _BACKWARD[e.op](e, c):
                inp = e.inputs[idx]
                prev = cots.get(id(inp))
                cots[id(inp)] = contrib if prev is None else T.add(prev, contrib)
    return cots


def value_and_grad(f, params, args, has_aux: bool = False, *, tape_hook=None):
    """Evaluate f(params, args) and differentiate it w.r.t. params.

    Returns (value, grads) or (value, grads, aux).  grads mirrors the params
    structure: float tensor leaves get gradient tensors (zeros if unused),
    everything else gets None.
    """
    tape = Tape()
    with T.tracing(tape):
        out = f(params, args)
    if has_aux:
        try:
            loss, aux = out
        except (TypeError, ValueError) as exc:
            raise ValueError("has_aux function must return (loss, aux)") from exc
    else:
        loss, aux = out, None
    if not isinstance(loss, Tensor) or not loss.dtype.is_float:
        raise ValueError("differentiated function must return a float tensor")
    if loss.shape != ():
        raise ValueError(f"differentiated function must return a scalar, got shape {loss.shape}")
    if tape_hook is not None:
        tape_hook(tape)
    cots = _backward(tape, loss)

    def leaf_grad(leaf):
        if isinstance(leaf, Tensor) and leaf.dtype.is_float:
            g = cots.get(id(leaf))
            return g if g is not None else T.zeros_like(leaf)
        return None

    grads = tree_map(leaf_grad, params)
    if has_aux:
        return loss, grads, aux
    return loss, grads


def grad(f, params, args, has_aux: bool = False):
    """Gradient-only variant of :func:`value_and_grad`."""
    res = value_and_grad(f, params, args, has_aux=has_aux)
    if has_aux:
        return res[1], res[2]
    return res[1]
