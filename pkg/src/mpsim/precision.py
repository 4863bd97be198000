"""Tree/function casting, dynamic loss scaling, and mixed-precision gradients.

The gradient transform follows the classic recipe: cast params and args to
half precision, evaluate the loss, multiply it by the current scale (a weak
scalar, so the loss dtype is preserved), differentiate, unscale the gradients
back to float32, check finiteness, and adjust the scale.  Master weights stay
with the caller in full precision and are re-cast on every call.

A process-wide switch selects which 16-bit format "half precision" means;
transforms read it at construction time.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff
from . import tensors as T
from .dtypes import BF16, DType, F16, F32, Scalar, quantize
from .tensors import Tensor
from .tree import all_finite, tree_map

_HALF_DTYPE = F16


def set_half_precision(dtype: DType):
    """Select the process-wide half-precision format (F16 or BF16)."""
    global _HALF_DTYPE
    if dtype not in (F16, BF16):
        raise ValueError("half precision must be f16 or bf16")
    _HALF_DTYPE = dtype


def get_half_precision() -> DType:
    return _HALF_DTYPE


@contextmanager
def half_precision(dtype: DType):
    """Temporarily switch the half-precision format."""
    previous = get_half_precision()
    set_half_precision(dtype)
    try:
        yield
    finally:
        set_half_precision(previous)


def cast_tree(t, dtype: DType):
    """Re-quantize every float tensor leaf of a tree to ``dtype``.

    Integer tensors, weak scalars and opaque leaves are unchanged; strong
    float scalars are re-quantized alongside the tensors.
    """
    if not dtype.is_float:
        raise ValueError("cast target must be a float dtype")

    def cast_leaf(leaf):
        if isinstance(leaf, Tensor) and leaf.dtype.is_float:
            return T.cast(leaf, dtype)
        if isinstance(leaf, Scalar) and not leaf.weak and leaf.dtype.is_float:
            return Scalar(quantize(leaf.value, dtype), weak=False, dtype=dtype)
        return leaf

    return tree_map(cast_leaf, t)


def cast_to_float16(x):
    return cast_tree(x, F16)


def cast_to_bfloat16(x):
    return cast_tree(x, BF16)


def cast_to_float32(x):
    return cast_tree(x, F32)


def cast_to_half_precision(x):
    return cast_tree(x, get_half_precision())


def cast_function(f, dtype: DType, return_dtype: DType | None = None):
    """Wrap f so its inputs are cast to ``dtype`` and, optionally, its outputs
    to ``return_dtype``."""
    if not dtype.is_float:
        raise ValueError("cast target must be a float dtype")
    if return_dtype is not None and not return_dtype.is_float:
        raise ValueError("return dtype must be a float dtype")

    def wrapped(*args, **kwargs):
        cargs, ckwargs = cast_tree((args, kwargs), dtype)
        out = f(*cargs, **ckwargs)
        if return_dtype is None:
            return out
        return cast_tree(out, return_dtype)

    return wrapped


def force_full_precision(f, return_dtype: DType):
    """Run f in float32 regardless of input precision, then cast its outputs.

    The escape hatch for overflow-prone pieces of a half-precision model:
    sums, means, softmax, layernorm.
    """
    if return_dtype is None:
        raise ValueError("force_full_precision needs a return dtype")
    return cast_function(f, F32, return_dtype)


_F32_MAX = float(np.finfo(np.float32).max)


class LossScaling(NamedTuple):
    """Dynamic loss-scaling state (an immutable value, threaded through steps).

    With the default factors every reachable scale is a power of two.  Growth
    that would push the scale past the largest finite float32 is skipped.
    """

    loss_scale: float
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: int = 2000
    steps_since_growth: int = 0
    min_scale: float = 1.0

    def scale(self, t):
        """Multiply every float tensor leaf by the scale (dtype preserved)."""
        s = self.loss_scale

        def scale_leaf(leaf):
            if isinstance(leaf, Tensor) and leaf.dtype.is_float:
                return T.mul(leaf, s)
            return leaf

        return tree_map(scale_leaf, t)

    def unscale(self, t):
        """Cast float tensor leaves to float32, then divide by the scale."""
        s = self.loss_scale

        def unscale_leaf(leaf):
            if isinstance(leaf, Tensor) and leaf.dtype.is_float:
                return T.div(T.cast(leaf, F32), s)
            return leaf

        return tree_map(unscale_leaf, t)

    def adjust(self, grads_finite: bool) -> "LossScaling":
        """Back off on non-finite gradients; grow after a finite streak."""
        # hot path: training loops and replay tests call this millions of
        # times, so build the result via tuple.__new__ instead of __init__
        scale, gf, bf, interval, n, ms = self
        if not grads_finite:
            scale = scale * bf
            if scale < ms:
                scale = ms
            n = 0
        elif n + 1 >= interval:
            grown = scale * gf
            if grown <= _F32_MAX:
                scale = grown
            n = 0
        else:
            n = n + 1
        return tuple.__new__(LossScaling, (scale, gf, bf, interval, n, ms))


@dataclass
class GradResult:
    """What the mixed-precision gradient transform hands back: the updated
    scaling, a finiteness flag for the optimizer gate, gradients shaped like
    the params (float32 leaves), and optionally aux output and the loss."""

    scaling: LossScaling
    grads_finite: bool
    grads: object
    aux: object = None
    value: Tensor | None = None


def filter_value_and_grad(f, scaling: LossScaling, has_aux: bool = False,
                          use_mixed_precision: bool = True, *, tape_hook=None):
    """Mixed-precision value-and-gradient transform.

    Returns a function of (params, args) producing a :class:`GradResult`.
    The reported value is the unscaled loss in float32.  With
    ``use_mixed_precision=False`` this is a plain float32 value_and_grad and
    the scaling passes through untouched.
    """
    half = get_half_precision()

    def transformed(params, args) -> GradResult:
        if not use_mixed_precision:
            p32 = cast_tree(params, F32)
            a32 = cast_tree(args, F32)
            res = autodiff.value_and_grad(f, p32, a32, has_aux=has_aux, tape_hook=tape_hook)
            value, grads = res[0], res[1]
            aux = res[2] if has_aux else None
            return GradResult(scaling, all_finite(grads), grads, aux, T.cast(value, F32))

        params_h = cast_tree(params, half)
        args_h = cast_tree(args, half)
        s = scaling.loss_scale

        if has_aux:
            def scaled_f(p, a):
                loss, aux = f(p, a)
                return T.mul(loss, s), aux
        else:
            def scaled_f(p, a):
                return T.mul(f(p, a), s)

        res = autodiff.value_and_grad(scaled_f, params_h, args_h, has_aux=has_aux,
                                      tape_hook=tape_hook)
        scaled_value, grads = res[0], res[1]
        aux = res[2] if has_aux else None
        grads = scaling.unscale(grads)
        finite = all_finite(grads)
        new_scaling = scaling.adjust(finite)
        value = T.div(T.cast(scaled_value, F32), s)
        return GradResult(new_scaling, finite, grads, aux, value)

    return transformed


def filter_grad(f, scaling: LossScaling, has_aux: bool = False,
                use_mixed_precision: bool = True, *, tape_hook=None):
    """Gradient-only variant of :func:`filter_value_and_grad`."""
    inner = filter_value_and_grad(f, scaling, has_aux=has_aux,
                                  use_mixed_precision=use_mixed_precision,
                                  tape_hook=tape_hook)

    def transformed(params, args) -> GradResult:
        res = inner(params, args)
        return GradResult(res.scaling, res.grads_finite, res.grads, res.aux, None)

    return transformed
