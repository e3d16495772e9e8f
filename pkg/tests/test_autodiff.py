import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hardneg_tgnn import autodiff as ad

finite = st.floats(-5, 5, allow_nan=False, width=64)


def fd(expr, bindings, wrt=None):
    return ad.finite_difference_check(expr, bindings, wrt or list(bindings), step=1e-5)


# ---------------------------------------------------------------- forward values


def test_sigmoid_of_zero_is_half():
    assert ad.evaluate(ad.sigmoid(ad.const(0.0)), precision="exact") == 0.5


def test_identity_matmul_returns_operand():
    a = np.random.default_rng(0).normal(size=(3, 3))
    out = ad.evaluate(ad.matmul(ad.const(np.eye(3)), ad.param("a")), {"a": a}, "exact")
    np.testing.assert_array_equal(out, a)


def test_softmax_of_equal_entries_is_uniform():
    out = ad.evaluate(ad.softmax(ad.const(np.ones(3))), precision="exact")
    np.testing.assert_allclose(out, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_log_sigmoid_is_stable_for_large_inputs():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = ad.evaluate(ad.log_sigmoid(ad.const(x)), precision="exact")
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[[0, 4]], [-800.0, 0.0], atol=1e-12)
    assert out[2] == pytest.approx(-np.log(2))


def test_precisions_select_dtypes():
    e = ad.param("x") * 2.0
    assert ad.evaluate(e, {"x": np.ones(2)}, "fast").dtype == np.float32
    assert ad.evaluate(e, {"x": np.ones(2)}, "exact").dtype == np.float64


def test_attention_single_key_returns_its_value():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(2, 1, 4)), rng.normal(size=(2, 1, 3))
    out = ad.evaluate(ad.attention(ad.const(q), ad.const(k), ad.const(v)), precision="exact")
    np.testing.assert_array_equal(out, v[:, 0, :])


def test_attention_fully_masked_row_is_zero():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    mask = np.array([[True, False, True], [False, False, False]])
    out = ad.evaluate(ad.attention(ad.const(q), ad.const(k), ad.const(v), mask), precision="exact")
    np.testing.assert_array_equal(out[1], 0.0)


def test_attention_uses_inverse_sqrt_dim_scaling():
    q = np.array([[1.0, 1.0, 1.0, 1.0]])
    k = np.array([[[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]]])
    v = np.array([[[1.0], [0.0]]])
    out = ad.evaluate(ad.attention(ad.const(q), ad.const(k), ad.const(v)), precision="exact")
    # logits 4/sqrt(4)=2 and 0
    assert out[0, 0] == pytest.approx(np.exp(2) / (np.exp(2) + 1), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = ad.evaluate(ad.softmax(ad.const(x), axis=1), precision="exact")
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_evaluate_is_referentially_transparent(x):
    e = ad.tanh(ad.matmul(ad.param("x"), ad.const(np.ones((4, 2))))) * 3.0
    a = ad.evaluate(e, {"x": x}, "fast")
    b = ad.evaluate(e, {"x": x.copy()}, "fast")
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- errors


def test_unbound_leaf_names_the_parameter():
    with pytest.raises(ad.UnboundLeafError, match="missing_w"):
        ad.evaluate(ad.param("missing_w") + 1.0, {})


def test_shape_mismatch_is_reported():
    e = ad.matmul(ad.param("a"), ad.param("b"))
    with pytest.raises(ad.ShapeError):
        ad.evaluate(e, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_no_general_broadcasting():
    with pytest.raises(ad.ShapeError):
        ad.evaluate(ad.param("a") + ad.param("b"), {"a": np.ones((2, 3)), "b": np.ones(3)})


def test_scalar_times_array_is_allowed():
    out = ad.evaluate(ad.param("a") * ad.const(2.0), {"a": np.ones((2, 3))}, "exact")
    np.testing.assert_array_equal(out, 2.0)


def test_gradient_requires_scalar_root():
    with pytest.raises(ad.ShapeError):
        ad.gradient(ad.param("a") * 2.0, {"a": np.ones(3)}, ["a"])


def test_non_finite_result_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.evaluate(ad.log(ad.const(np.array([0.0, 1.0]))), precision="exact")


# ---------------------------------------------------------------- gradients


def test_sigmoid_derivative_at_zero():
    g = ad.gradient(ad.sum(ad.sigmoid(ad.param("x"))), {"x": np.zeros(1)}, ["x"], "exact")
    assert g["x"][0] == pytest.approx(0.25, abs=1e-15)


def test_linear_form_gradient_is_the_other_vector():
    b = np.array([0.3, -1.2, 2.0])
    g = ad.gradient(ad.sum(ad.param("a") * ad.const(b)), {"a": np.ones(3)}, ["a"], "exact")
    np.testing.assert_array_equal(g["a"], b)


def test_neg_log_sigmoid_dot_gradient():
    # d/da of -log s(a.b) at a=b=(1,0) is (s(1)-1) * b
    e = -ad.log_sigmoid(ad.rowdot(ad.param("a"), ad.param("b")))
    e = ad.sum(e)
    one = np.array([[1.0, 0.0]])
    g = ad.gradient(e, {"a": one, "b": one}, ["a"], "exact")
    s1 = 1 / (1 + np.exp(-1.0))
    np.testing.assert_allclose(g["a"], [[s1 - 1, 0.0]], atol=1e-15)
    assert g["a"][0, 0] == pytest.approx(-0.2689, abs=1e-4)


def test_unused_parameter_gets_zero_gradient():
    g = ad.gradient(ad.sum(ad.param("a")), {"a": np.ones(2), "b": np.ones(3)}, ["a", "b"], "exact")
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_shared_subexpression_accumulates():
    x = ad.param("x")
    y = x * x
    g = ad.gradient(ad.sum(y + y), {"x": np.array([3.0])}, ["x"], "exact")
    assert g["x"][0] == pytest.approx(12.0)


def test_quadratic_finite_difference_error_is_tiny():
    x = ad.param("x")
    e = ad.scale(ad.sum(x * x), 0.5)
    assert fd(e, {"x": np.random.default_rng(0).normal(size=7)}) < 1e-6


def test_constant_expression_has_zero_gradient_and_error():
    e = ad.sum(ad.const(np.ones(3))) + ad.sum(ad.param("x")) * 0.0
    g = ad.gradient(e, {"x": np.ones(2)}, ["x"], "exact")
    np.testing.assert_array_equal(g["x"], 0.0)
    assert fd(e, {"x": np.ones(2)}) == 0.0


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_difference_check(ad.sum(ad.param("x")), {"x": np.ones(1)}, ["x"], step=0.0)


OP_CASES = {
    "add_sub": lambda a, b: ad.sum((a + b) * (a - b)),
    "mul": lambda a, b: ad.sum(a * b * a),
    "matmul": lambda a, b: ad.sum(ad.tanh(ad.matmul(a, ad.reshape(b, (4, 3))))),
    "concat": lambda a, b: ad.sum(ad.sigmoid(ad.concat([a, b], axis=1)) * ad.const(np.arange(24.0).reshape(3, 8))),
    "sigmoid": lambda a, b: ad.sum(ad.sigmoid(a * b)),
    "log_sigmoid": lambda a, b: ad.sum(ad.log_sigmoid(a - b)),
    "log_exp": lambda a, b: ad.sum(ad.log(ad.exp(a) + ad.exp(b))),
    "tanh_cos": lambda a, b: ad.sum(ad.tanh(a) * ad.cos(b)),
    "leaky_relu": lambda a, b: ad.sum(ad.leaky_relu(a) * b),
    "mean_axis": lambda a, b: ad.sum(ad.mean(a * b, axis=0) * ad.const(np.arange(1.0, 5.0))),
    "sum_axis": lambda a, b: ad.sum(ad.tanh(ad.sum(a, axis=1)) * ad.sum(b, axis=1)),
    "softmax": lambda a, b: ad.sum(ad.softmax(a, axis=1) * b),
    "slice": lambda a, b: ad.sum(ad.slice_(a, (slice(0, 2), slice(1, 3))) * ad.slice_(b, (slice(1, 3), slice(0, 2)))),
    "take_rows": lambda a, b: ad.sum(ad.take_rows(a, [2, 0, 2, 1]) * ad.take_rows(b, [0, 1, 1, 2])),
    "tile_rows": lambda a, b: ad.sum(ad.tanh(a + ad.tile_rows(ad.slice_(b, (0,)), 3))),
    "rowdot": lambda a, b: ad.sum(ad.log_sigmoid(ad.rowdot(a, b))),
    "attention": lambda a, b: ad.sum(
        ad.attention(a, ad.reshape(ad.concat([b, b * 0.5], axis=1), (3, 2, 4)), ad.reshape(ad.concat([a, b], axis=1), (3, 2, 4)),
                     np.array([[True, True], [True, False], [False, False]]))
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    bind = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}
    e = OP_CASES[name](ad.param("a"), ad.param("b"))
    assert fd(e, bind) < 1e-4


# central differences lose ~1e-11 absolute to round-off, so keep gradients O(1e-3) or larger
conditioned = st.floats(0.1, 2.0).flatmap(lambda x: st.sampled_from([x, -x]))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=conditioned), hnp.arrays(np.float64, (3, 2), elements=conditioned))
def test_gradient_property_random_composite(a, w):
    e = ad.sum(ad.log_sigmoid(ad.matmul(ad.tanh(ad.param("a")), ad.param("w"))))
    assert fd(e, {"a": a, "w": w}) < 1e-4
