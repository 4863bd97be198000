"""Casting transforms, dynamic loss scaling, and the mixed-precision gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mpsim
from mpsim import (
    BF16,
    F16,
    F32,
    I32,
    GradResult,
    LossScaling,
    Scalar,
    all_finite,
    cast_function,
    cast_to_bfloat16,
    cast_to_float16,
    cast_to_float32,
    cast_to_half_precision,
    cast_tree,
    filter_grad,
    filter_value_and_grad,
    float_leaves,
    force_full_precision,
    get_half_precision,
    half_precision,
    set_half_precision,
    tensor,
    value_and_grad,
)
from mpsim import tensors as T
from oracles import simulate_scaling


# --- cast_tree ---------------------------------------------------------------

def test_cast_tree_quantizes_floats_and_skips_ints():
    t = {"w": tensor([1.0, 2.0**-25], F32), "k": tensor([7], I32)}
    out = cast_tree(t, F16)
    assert out["w"].dtype is F16
    np.testing.assert_array_equal(out["w"].payload, [1.0, 0.0])
    assert out["k"] is t["k"]


def test_cast_tree_same_dtype_keeps_values():
    t = {"w": tensor([0.1, 65504.0], F16)}
    out = cast_tree(t, F16)
    assert np.array_equal(out["w"].payload.view(np.uint32), t["w"].payload.view(np.uint32))


def test_cast_tree_empty():
    assert cast_tree({}, F16) == {}
    assert cast_tree([], F32) == []


def test_cast_tree_rejects_integer_target():
    with pytest.raises(ValueError):
        cast_tree({"w": tensor([1.0])}, I32)


def test_cast_tree_scalars():
    t = {"weak": Scalar(0.1), "strong": Scalar(0.1, weak=False, dtype=F32), "s": "x"}
    out = cast_tree(t, F16)
    assert out["weak"] is t["weak"]
    assert out["strong"].dtype is F16
    assert out["strong"].value == pytest.approx(0.0999755859375)
    assert out["s"] is t["s"]


def test_cast_aliases_and_process_switch():
    t = {"w": tensor([1.0])}
    assert cast_to_float16(t)["w"].dtype is F16
    assert cast_to_bfloat16(t)["w"].dtype is BF16
    assert cast_to_float32(cast_to_float16(t))["w"].dtype is F32
    assert get_half_precision() is F16
    assert cast_to_half_precision(t)["w"].dtype is F16
    with half_precision(BF16):
        assert get_half_precision() is BF16
        assert cast_to_half_precision(t)["w"].dtype is BF16
    assert get_half_precision() is F16
    with pytest.raises(ValueError):
        set_half_precision(F32)


# --- cast_function / force_full_precision -------------------------------------

def test_cast_function_identity():
    g = cast_function(lambda x: x, F16)
    out = g(tensor([0.1], F32))
    assert out.dtype is F16
    np.testing.assert_array_equal(out.payload, np.float32(np.float16(0.1)))


def test_cast_function_demotes_before_overflow():
    f = lambda x: T.reduce("sum", x)
    g = cast_function(f, F16, return_dtype=F32)
    out = g(tensor([60000.0, 60000.0], F32))
    assert out.dtype is F32
    assert math.isinf(out.item())


def test_cast_function_return_dtype_omitted():
    f = lambda a, b: T.add(a, b)
    g = cast_function(f, F16)
    out = g(tensor([1.0], F32), b=tensor([1.0], BF16))
    # both inputs cast to f16, promotion keeps f16, nothing re-cast afterwards
    assert out.dtype is F16


def test_force_full_precision_rescues_mean():
    mean = lambda x: T.reduce("mean", x)
    data = tensor([60000.0, 60000.0], F16)
    assert math.isinf(mean(data).item())
    g = force_full_precision(mean, F16)
    out = g(data)
    assert out.dtype is F16
    assert out.item() == 60000.0


def test_force_full_precision_softmax_island():
    g = force_full_precision(T.softmax, F16)
    out = g(tensor([3.0, 3.0], F16), axis=0)
    assert out.dtype is F16
    np.testing.assert_array_equal(out.payload, [0.5, 0.5])


def test_force_full_precision_identity_is_double_cast():
    g = force_full_precision(lambda x: x, BF16)
    out = g(tensor([0.1], F16))
    assert out.dtype is BF16
    want = mpsim.quantize(mpsim.quantize(np.float32(0.1), F16), BF16)
    assert out.payload[0] == np.float32(want)


# --- LossScaling -------------------------------------------------------------

def test_scale_preserves_dtype_and_values():
    s = LossScaling(1024.0)
    out = s.scale({"g": tensor([0.5], F16)})
    assert out["g"].dtype is F16
    np.testing.assert_array_equal(out["g"].payload, [512.0])


def test_scale_overflows_f16():
    s = LossScaling(65536.0)
    out = s.scale({"g": tensor([2.0], F16)})
    assert math.isinf(out["g"].payload[0])


def test_scale_one_is_identity():
    s = LossScaling(1.0)
    t = {"g": tensor([0.1, -3.0], F16)}
    out = s.scale(t)
    assert np.array_equal(out["g"].payload.view(np.uint32), t["g"].payload.view(np.uint32))


def test_unscale_casts_to_f32_then_divides():
    s = LossScaling(1024.0)
    out = s.unscale({"g": tensor([512.0], F16)})
    assert out["g"].dtype is F32
    np.testing.assert_array_equal(out["g"].payload, [0.5])


def test_unscale_keeps_non_finite():
    s = LossScaling(1024.0)
    out = s.unscale({"g": tensor([np.inf], F16)})
    assert math.isinf(out["g"].payload[0])
    assert out["g"].dtype is F32


def test_unscale_empty():
    assert LossScaling(8.0).unscale({}) == {}


def test_adjust_backoff():
    s = LossScaling(1024.0)
    out = s.adjust(False)
    assert out.loss_scale == 512.0 and out.steps_since_growth == 0


def test_adjust_growth_at_interval_boundary():
    s = LossScaling(1024.0, growth_interval=2000, steps_since_growth=1999)
    out = s.adjust(True)
    assert out.loss_scale == 2048.0 and out.steps_since_growth == 0


def test_adjust_counts_quiet_steps():
    s = LossScaling(1024.0, growth_interval=2000)
    out = s.adjust(True)
    assert out.loss_scale == 1024.0 and out.steps_since_growth == 1


def test_adjust_min_scale_clamp():
    s = LossScaling(1.0, min_scale=1.0)
    out = s.adjust(False)
    assert out.loss_scale == 1.0


def test_adjust_skips_growth_past_f32_max():
    s = LossScaling(2.0**127, growth_interval=1)
    out = s.adjust(True)
    assert out.loss_scale == 2.0**127  # growth skipped
    assert out.steps_since_growth == 0
    grown = LossScaling(2.0**126, growth_interval=1).adjust(True)
    assert grown.loss_scale == 2.0**127


def test_adjust_invariants_hold():
    s = LossScaling(8.0, growth_interval=3, min_scale=0.5)
    for flag in (True, True, False, True, True, True, False, False, True):
        s = s.adjust(flag)
        assert s.loss_scale >= s.min_scale
        assert math.isfinite(s.loss_scale)
        assert s.steps_since_growth < s.growth_interval


@given(st.lists(st.booleans(), min_size=1, max_size=300),
       st.sampled_from([1, 2, 5, 50]),
       st.sampled_from([1.0, 2.0**15, 2.0**120]))
@settings(max_examples=50)
def test_adjust_matches_simulator(flags, interval, init):
    s = LossScaling(init, growth_interval=interval)
    ref = simulate_scaling(init, 2.0, 0.5, interval, 1.0, flags)
    for flag, (want_scale, want_counter) in zip(flags, ref):
        s = s.adjust(flag)
        assert s.loss_scale == want_scale
        assert s.steps_since_growth == want_counter


def test_power_of_two_closure():
    s = LossScaling(1.0, growth_factor=2.0, backoff_factor=0.5, growth_interval=1)
    rng = np.random.default_rng(0)
    for flag in rng.random(200) < 0.7:
        s = s.adjust(bool(flag))
        m, e = math.frexp(s.loss_scale)
        assert m == 0.5  # exactly a power of two


# --- scale/unscale round trip -------------------------------------------------

@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, width=32), min_size=1, max_size=8),
       st.integers(min_value=-10, max_value=10))
@settings(max_examples=60)
def test_scale_unscale_round_trip_f32(vals, log2_scale):
    t = {"g": tensor(vals, F32)}
    s = LossScaling(2.0**log2_scale)
    out = s.unscale(s.scale(t))
    np.testing.assert_array_equal(out["g"].payload, t["g"].payload)
    assert out["g"].dtype is F32


# --- filter_value_and_grad / filter_grad ---------------------------------------

def _square(p, a):
    return T.mul(p["w"], p["w"])


def test_transform_simple_square():
    res = filter_value_and_grad(_square, LossScaling(1024.0))({"w": tensor(3.0)}, {})
    assert isinstance(res, GradResult)
    assert res.value.item() == 9.0
    assert res.value.dtype is F32
    assert res.grads_finite
    assert res.grads["w"].dtype is F32
    assert res.grads["w"].item() == 6.0
    assert res.scaling.steps_since_growth == 1
    assert res.scaling.loss_scale == 1024.0


def test_transform_overflow_backs_off():
    f = lambda p, a: T.reduce("sum", T.mul(p["w"], 60000.0))
    res = filter_value_and_grad(f, LossScaling(65536.0))({"w": tensor([2.0])}, {})
    assert not res.grads_finite
    assert not all_finite(res.grads)
    assert res.scaling.loss_scale == 32768.0
    assert res.scaling.steps_since_growth == 0


def test_transform_full_precision_passthrough():
    params = {"w": tensor([1.5, -2.0])}
    f = lambda p, a: T.reduce("sum", T.mul(p["w"], p["w"]))
    scaling = LossScaling(4096.0, steps_since_growth=7)
    res = filter_value_and_grad(f, scaling, use_mixed_precision=False)(params, {})
    _, plain = value_and_grad(f, params, {})
    np.testing.assert_array_equal(res.grads["w"].payload, plain["w"].payload)
    assert res.scaling is scaling  # untouched
    assert res.grads_finite


def test_transform_grads_are_f32_even_when_non_finite():
    f = lambda p, a: T.reduce("sum", T.mul(p["w"], 60000.0))
    res = filter_value_and_grad(f, LossScaling(65536.0))({"w": tensor([2.0], F16)}, {})
    for _, leaf in float_leaves(res.grads):
        assert leaf.dtype is F32


def test_transform_unused_leaf_gets_f32_zeros():
    f = lambda p, a: T.mul(p["w"], p["w"])
    res = filter_value_and_grad(f, LossScaling(8.0))(
        {"w": tensor(2.0), "idle": tensor([1.0], BF16)}, {})
    assert res.grads["idle"].dtype is F32
    np.testing.assert_array_equal(res.grads["idle"].payload, [0.0])


def test_transform_respects_half_selection():
    captured = []
    f = lambda p, a: T.mul(p["w"], p["w"])
    with half_precision(BF16):
        transform = filter_value_and_grad(f, LossScaling(2.0),
                                          tape_hook=captured.append)
    transform({"w": tensor(3.0)}, {})
    # the squaring ran on bfloat16 inputs
    mul_entry = [e for e in captured[0].entries if e.op == "mul"][0]
    assert mul_entry.inputs[0].dtype is BF16


def test_transform_has_aux_passthrough_uncast():
    def f(p, a):
        h = T.mul(p["w"], p["w"])
        return T.reduce("sum", h), {"h": h}

    res = filter_value_and_grad(f, LossScaling(64.0), has_aux=True)(
        {"w": tensor([2.0])}, {})
    assert res.aux["h"].dtype is F16  # produced at half precision, not re-cast
    assert res.grads_finite


def test_filter_grad_drops_value():
    res = filter_grad(_square, LossScaling(1024.0))({"w": tensor(3.0)}, {})
    assert res.value is None
    assert res.grads["w"].item() == 6.0


def test_non_finite_params_surface_as_non_finite_grads():
    f = lambda p, a: T.reduce("sum", T.mul(p["w"], p["w"]))
    res = filter_value_and_grad(f, LossScaling(2.0))({"w": tensor([np.nan])}, {})
    assert not res.grads_finite


def test_mixed_vs_full_gradient_agreement():
    rng = np.random.default_rng(42)
    widths = [6, 8, 4]
    params = {"layers": [
        {"w": tensor(rng.standard_normal((widths[i], widths[i + 1])) / math.sqrt(widths[i])),
         "b": tensor(np.zeros(widths[i + 1]))}
        for i in range(len(widths) - 1)
    ]}
    x = tensor(rng.standard_normal((8, widths[0])))
    y = tensor(rng.integers(0, widths[-1], 8), I32)

    def loss(p, a):
        z = a["x"]
        for i, layer in enumerate(p["layers"]):
            z = T.add(T.matmul(z, layer["w"]), layer["b"])
            if i < len(p["layers"]) - 1:
                z = T.relu(z)
        return T.cross_entropy(z, a["y"])

    full = filter_value_and_grad(loss, LossScaling(2.0**15), use_mixed_precision=False)(
        params, {"x": x, "y": y})
    mixed = filter_value_and_grad(loss, LossScaling(2.0**15))(params, {"x": x, "y": y})
    assert mixed.grads_finite and full.grads_finite
    for (path, leaf_full), (_, leaf_mixed) in zip(
            float_leaves(full.grads), float_leaves(mixed.grads)):
        f_ = leaf_full.payload
        m_ = leaf_mixed.payload
        magnitude = np.abs(f_).max()
        if magnitude <= 1e-4:  # below that, f16 resolution dominates
            continue
        rel = np.abs(m_ - f_).max() / magnitude
        assert rel <= 5e-2, f"leaf {path}: relative error {rel}"
