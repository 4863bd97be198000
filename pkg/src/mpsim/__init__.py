"""mpsim: simulated mixed-precision training.

Deterministic, hardware-independent reproduction of half-precision training
behaviour: values are stored at 32-bit width but every operation quantizes
its result onto the nominal format's grid, so float16/bfloat16 overflow,
underflow, resolution loss, and the dynamic loss scaling that tames them are
all observable on any CPU.
"""

from .autodiff import Tape, TapeEntry, grad, value_and_grad
from .dtypes import BF16, DType, F16, F32, I32, Scalar, promote, promote_with_scalar, quantize, quantize_array
from .optim import OptimizerState, adam_init, compute_updates, optimizer_update, sgd_init
from .precision import (
    GradResult,
    LossScaling,
    cast_function,
    cast_to_bfloat16,
    cast_to_float16,
    cast_to_float32,
    cast_to_half_precision,
    cast_tree,
    filter_grad,
    filter_value_and_grad,
    force_full_precision,
    get_half_precision,
    half_precision,
    set_half_precision,
)
from .tensors import Tensor, bytes_of, cross_entropy, elementwise, layernorm, matmul, reduce, softmax, tensor
from .tree import TreeError, all_finite, float_leaves, format_tree, tree_leaves, tree_map, tree_structure, tree_zip_map

__version__ = "0.1.0"
