"""Numeric formats, quantization, and the type-promotion lattice.

Every payload in this package is stored at 32-bit width; a value "is" float16
or bfloat16 when it sits exactly on that format's grid.  ``quantize_array`` is
the one place where rounding onto a grid happens: round to nearest, ties to
even, with subnormal support and IEEE overflow to +/-inf.  Arithmetic is
always performed in binary32 and the *result* is quantized, so half-precision
overflow and underflow behave deterministically on any host.

The promotion lattice has I32 at the bottom, the two 16-bit float formats
incomparable in the middle, and F32 on top:

        F32
       /   \\
     F16   BF16
       \\   /
        I32

Weak scalars (plain Python literals) sit below everything and never raise the
precision of a tensor they combine with.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class DType(Enum):
    F16 = "f16"
    BF16 = "bf16"
    F32 = "f32"
    I32 = "i32"

    @property
    def byte_width(self) -> int:
        return _BYTE_WIDTH[self]

    @property
    def is_float(self) -> bool:
        return self is not DType.I32

    def __repr__(self) -> str:
        return self.value


_BYTE_WIDTH = {DType.F16: 2, DType.BF16: 2, DType.F32: 4, DType.I32: 4}

F16 = DType.F16
BF16 = DType.BF16
F32 = DType.F32
I32 = DType.I32

# lattice rank: equal-rank distinct dtypes (F16, BF16) join to F32
_RANK = {I32: 0, F16: 1, BF16: 1, F32: 2}


def promote(a: DType, b: DType) -> DType:
    """Join of two dtypes in the promotion lattice."""
    if a is b:
        return a
    ra, rb = _RANK[a], _RANK[b]
    if ra == rb:
        return F32
    return a if ra > rb else b


@dataclass(frozen=True)
class Scalar:
    """A scalar operand.

    Weak scalars model Python literals: they take part in arithmetic at
    binary32 width but never influence the output dtype.  A strong scalar
    carries a dtype and promotes like a 0-d tensor of that dtype.
    """

    value: float
    weak: bool = True
    dtype: DType | None = None

    def __post_init__(self):
        if not self.weak and self.dtype is None:
            inferred = I32 if isinstance(self.value, int) and not isinstance(self.value, bool) else F32
            object.__setattr__(self, "dtype", inferred)


def promote_with_scalar(t: DType, s: Scalar) -> DType:
    """Output dtype of a tensor/scalar combination."""
    if s.weak:
        return t
    return promote(t, s.dtype)


_MAX_I32 = 2**31 - 1
_MIN_I32 = -(2**31)


def quantize_array(values, dtype: DType) -> np.ndarray:
    """Round a float32 array onto the grid of a float dtype (RNE).

    Quantizing to F32 is the identity.  Magnitudes beyond the target's largest
    finite value become +/-inf; NaN stays NaN; signed zeros are preserved.
    """
    if not dtype.is_float:
        raise ValueError("integers are never quantized")
    a = np.asarray(values, dtype=np.float32)
    if dtype is F32:
        return a
    with np.errstate(over="ignore", invalid="ignore"):
        if dtype is F16:
            return a.astype(np.float16).astype(np.float32)
        # BF16: round the binary32 encoding on the top-16-bit grid.  Adding
        # 0x7FFF plus the parity of bit 16 implements ties-to-even, and a
        # carry out of the mantissa walks into the exponent, which is exactly
        # the IEEE overflow-to-inf behaviour.
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        u = a.view(np.uint32)
        rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) & np.uint32(0xFFFF0000)
        out = rounded.view(np.float32)
        return np.where(np.isnan(a), a, out)


def quantize(value: float, dtype: DType) -> float:
    """Scalar convenience wrapper around :func:`quantize_array`."""
    return float(quantize_array(np.float32(value), dtype))
