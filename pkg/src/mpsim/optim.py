"""Optimizers over parameter trees with a finite-gated update.

Moments and updates are kept in float32 (master-weight discipline); the
update is quantized only at the final addition, to each parameter leaf's own
dtype.  When the gradient tree is non-finite the update is skipped entirely:
the model and the optimizer state come back bit-identical, step count and
moments untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import tensors as T
from .dtypes import quantize_array
from .tensors import Tensor
from .tree import float_leaves, tree_map, tree_zip_map


@dataclass(frozen=True)
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    mu: object = None  # first-moment tree (adam), structure of params
    nu: object = None  # second-moment tree (adam)


def _zero_moments(params):
    def zero_leaf(leaf):
        if isinstance(leaf, Tensor) and leaf.dtype.is_float:
            return T.zeros(leaf.shape)
        return None

    return tree_map(zero_leaf, params)


def _check_params(params):
    if not float_leaves(params):
        raise ValueError("params contain no float tensor leaves")


def sgd_init(params, lr: float) -> OptimizerState:
    _check_params(params)
    return OptimizerState("sgd", lr)


def adam_init(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimizerState:
    _check_params(params)
    return OptimizerState("adam", lr, beta1, beta2, eps,
                          mu=_zero_moments(params), nu=_zero_moments(params))


def compute_updates(state: OptimizerState, grads):
    """Updates for one step plus the advanced state; gradients must be float32."""
    if state.kind == "sgd":
        def sgd_leaf(g):
            if isinstance(g, Tensor):
                return T.mul(g, -state.lr)
            return None

        return tree_map(sgd_leaf, grads), replace(state, step_count=state.step_count + 1)

    if state.kind != "adam":
        raise ValueError(f"unknown optimizer kind {state.kind!r}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t

    def moment1(m, g):
        if not isinstance(g, Tensor):
            return None
        return T.add(T.mul(m, b1), T.mul(g, 1.0 - b1))

    def moment2(v, g):
        if not isinstance(g, Tensor):
            return None
        return T.add(T.mul(v, b2), T.mul(T.mul(g, g), 1.0 - b2))

    new_mu = tree_zip_map(moment1, state.mu, grads)
    new_nu = tree_zip_map(moment2, state.nu, grads)

    def update_leaf(m, v):
        if not isinstance(m, Tensor):
            return None
        m_hat = T.div(m, bc1)
        v_hat = T.div(v, bc2)
        return T.neg(T.div(T.mul(m_hat, state.lr), T.add(T.sqrt(v_hat), state.eps)))

    updates = tree_zip_map(update_leaf, new_mu, new_nu)
    return updates, replace(state, step_count=t, mu=new_mu, nu=new_nu)


def optimizer_update(model, state: OptimizerState, grads, grads_finite: bool):
    """Apply one gated step: params move only when the gradients are finite."""
    if not grads_finite:
        return model, state
    updates, new_state = compute_updates(state, grads)

    def apply_leaf(leaf, upd):
        if not isinstance(upd, Tensor) or not isinstance(leaf, Tensor):
            return leaf
        # add in binary32, then quantize to the parameter's own dtype so
        # full-precision master weights are never demoted
        return Tensor(quantize_array(leaf.payload + upd.payload, leaf.dtype), leaf.dtype)

    return tree_zip_map(apply_leaf, model, updates), new_state
