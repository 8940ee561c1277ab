import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vascl import numcore as nc

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(tape, value):
    return tape.leaf(np.asarray(value, dtype=float), requires_grad=True)


# --- forward primitives ------------------------------------------------------


def test_affine_identity():
    t = nc.Tape()
    out = nc.affine(t.constant([[3.0, 4.0]]), t.constant(np.eye(2)), t.constant(np.zeros((1, 2))))
    np.testing.assert_array_equal(out.value, [[3.0, 4.0]])


def test_relu_definition():
    t = nc.Tape()
    np.testing.assert_array_equal(nc.relu(t.constant([[-1.0, 2.0]])).value, [[0.0, 2.0]])


def test_l2_normalize_three_four():
    t = nc.Tape()
    np.testing.assert_allclose(nc.l2_normalize(t.constant([[3.0, 4.0]])).value, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_rejects_zero_row():
    t = nc.Tape()
    with pytest.raises(nc.DegenerateInputError):
        nc.l2_normalize(t.constant([[1.0, 0.0], [0.0, 0.0]]))


def test_non_finite_input_rejected():
    with pytest.raises(nc.NonFiniteError):
        nc.Tape().leaf([[1.0, np.nan]])
    with pytest.raises(nc.NonFiniteError):
        nc.as_matrix([np.inf])


def test_shape_mismatch_errors():
    t = nc.Tape()
    a, b = t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3)))
    with pytest.raises(nc.ShapeError):
        nc.matmul(a, b)
    with pytest.raises(nc.ShapeError):
        nc.add(a, t.constant(np.ones((3, 2))))
    with pytest.raises(nc.ShapeError):
        nc.apply_mask(a, np.ones((3, 2)))
    with pytest.raises(nc.ShapeError):
        nc.as_matrix(np.ones((2, 2, 2)))


def test_tape_records_every_primitive():
    t = nc.Tape()
    x = t.constant([[1.0, -2.0]])
    nc.relu(nc.scale(x, 2.0))
    assert [n.name for n in t.nodes[1:]] == ["scale", "relu"]


def test_operands_from_another_tape_rejected():
    a, b = nc.Tape(), nc.Tape()
    with pytest.raises(nc.TapeError):
        nc.add(a.constant([[1.0]]), b.constant([[1.0]]))


def test_overflow_is_rejected():
    t = nc.Tape()
    with pytest.raises(nc.NonFiniteError), np.errstate(over="ignore"):
        nc.scale(t.constant([[1e308]]), 10.0)


# --- backward ----------------------------------------------------------------


def test_square_gradient():
    t = nc.Tape()
    x = leaf(t, [[3.0]])
    t.backward(nc.multiply(x, x))
    assert x.grad[0, 0] == 6.0


def test_constant_function_gradient_zero():
    t = nc.Tape()
    x = leaf(t, [[3.0, 1.0]])
    out = nc.sum_all(t.constant([[5.0]]))
    t.backward(out)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_backward_errors():
    t = nc.Tape()
    x = leaf(t, [[1.0, 2.0]])
    y = nc.scale(x, 2.0)
    with pytest.raises(nc.ShapeError):
        t.backward(y)  # non-scalar without a seed
    with pytest.raises(nc.ShapeError):
        t.backward(y, seed=np.ones((2, 1)))
    t.backward(y, seed=np.ones((1, 2)))
    with pytest.raises(nc.TapeError):
        t.backward(y, seed=np.ones((1, 2)))
    stranger = nc.Node(nc.Tape(), np.ones((1, 1)), True)
    with pytest.raises(nc.TapeError):
        nc.Tape().backward(stranger)


def test_backward_visits_each_node_once_in_reverse_order():
    t = nc.Tape()
    x = leaf(t, [[0.3, -0.7]])
    a = nc.tanh(x)
    b = nc.multiply(a, a)  # diamond: a feeds b twice
    out = nc.sum_all(nc.add(b, a))
    visits = []
    for node in t.nodes:
        if node.backward_fn is not None:
            fn = node.backward_fn
            node.backward_fn = lambda g, fn=fn, i=node.index: (visits.append(i), fn(g))[1]
    t.backward(out)
    assert visits == sorted(visits, reverse=True)
    assert len(visits) == len(set(visits))
    s = np.tanh(x.value)
    np.testing.assert_allclose(x.grad, (2 * s + 1) * (1 - s * s), rtol=1e-12)


def test_differentiable_input_gets_gradient():
    t = nc.Tape()
    w = t.leaf(np.array([[2.0]]))  # not trainable
    d = t.leaf(np.array([[0.5]]), requires_grad=True)
    t.backward(nc.sum_all(nc.matmul(d, w)))
    assert d.grad[0, 0] == 2.0
    assert w.grad is None


def _mlp_value_and_grad(x, W1, b1, W2):
    t = nc.Tape()
    xn = t.leaf(x, requires_grad=True)
    h = nc.tanh(nc.affine(xn, t.constant(W1), t.constant(b1)))
    out = nc.sum_all(nc.multiply(nc.matmul(h, t.constant(W2)), nc.matmul(h, t.constant(W2))))
    t.backward(out)
    return float(out.value[0, 0]), xn.grad


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    W1, b1, W2 = rng.normal(size=(4, 5)), rng.normal(size=(1, 5)), rng.normal(size=(5, 3))
    report = nc.grad_check(lambda x: _mlp_value_and_grad(x, W1, b1, W2), rng.normal(size=(3, 4)))
    assert report.passed and report.max_rel_error <= 1e-4


PRIMITIVES = {
    "add_broadcast": lambda t, a, b: nc.add(a, nc.take_rows(b, [0])),
    "multiply": lambda t, a, b: nc.multiply(a, b),
    "matmul": lambda t, a, b: nc.matmul(a, nc.transpose(b)),
    "tanh": lambda t, a, b: nc.tanh(a),
    "relu": lambda t, a, b: nc.relu(a),
    "mask": lambda t, a, b: nc.apply_mask(a, np.array([[2.0, 0.0, 1.0]] * 4)),
    "normalize": lambda t, a, b: nc.l2_normalize(a),
    "row_dot": lambda t, a, b: nc.row_dot(a, b),
    "cosine_matrix": lambda t, a, b: nc.cosine_matrix(a, b),
    "cosine_self": lambda t, a, b: nc.cosine_matrix(a, a),
    "row_cosine": lambda t, a, b: nc.row_cosine(a, b),
    "concat": lambda t, a, b: nc.concat_rows([a, b, a]),
    "take_rows": lambda t, a, b: nc.take_rows(a, [0, 0, 3]),
    "take_per_row": lambda t, a, b: nc.take_per_row(a, [[0, 0], [1, 2], [2, 1], [0, 2]]),
    "logsumexp": lambda t, a, b: nc.logsumexp_rows(a, np.array([[1, 0, 1]] * 4, dtype=bool)),
    "xent": lambda t, a, b: nc.softmax_xent_rows(a, [0, 1, 1, 2], np.array([[1, 1, 0], [1, 1, 1]] * 2, dtype=bool)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    a0 = rng.normal(size=(4, 3))
    a0[np.abs(a0) < 0.05] += 0.2  # keep away from the relu kink
    b0 = rng.normal(size=(4, 3))

    def make(which):
        def fn(x):
            t = nc.Tape()
            a = t.leaf(x if which == "a" else a0, requires_grad=which == "a")
            b = t.leaf(x if which == "b" else b0, requires_grad=which == "b")
            out = PRIMITIVES[name](t, a, b)
            # a fixed non-uniform weighting turns the output into a scalar
            w = np.linspace(0.5, 1.5, out.value.size).reshape(out.shape)
            loss = nc.sum_all(nc.multiply(out, t.constant(w)))
            t.backward(loss)
            return float(loss.value[0, 0]), (a if which == "a" else b).grad

        return fn

    assert nc.grad_check(make("a"), a0).passed
    assert nc.grad_check(make("b"), b0).passed


def test_logsumexp_is_stable():
    t = nc.Tape()
    out = nc.logsumexp_rows(t.constant([[1000.0, 1000.0]]))
    assert out.value[0, 0] == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)


def test_xent_rejects_masked_target():
    t = nc.Tape()
    with pytest.raises(ValueError):
        nc.softmax_xent_rows(t.constant([[1.0, 2.0]]), [1], np.array([[True, False]]))


# --- grad_check --------------------------------------------------------------


def test_grad_check_sum_of_squares():
    report = nc.grad_check(lambda x: (float(np.sum(x * x)), 2 * x), np.array([1.0, 2.0, 3.0]), tolerance=1e-6)
    assert report.passed
    assert report.max_rel_error <= 1e-6


def test_grad_check_flags_wrong_gradient():
    report = nc.grad_check(lambda x: (float(np.sum(x * x)), 3 * x), np.array([1.0, 2.0]))
    assert not report.passed


def test_grad_check_non_finite():
    with pytest.raises(nc.NonFiniteError):
        nc.grad_check(lambda x: (float(np.log(x[0] - 1.0 + 1e-6)) if x[0] > 1 else float("nan"), x), [1.0])


def test_relative_error_definition():
    assert nc.relative_error(np.array([1.0]), np.array([1.1]))[0] == pytest.approx(0.1 / 1.1)
    assert nc.relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(0.1)


# --- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    w = {"w": np.array([[1.0, -2.0]])}
    state = nc.AdamState({"default": 0.1})
    nc.adam_step(state, w, {"w": np.zeros((1, 2))})
    np.testing.assert_array_equal(w["w"], [[1.0, -2.0]])
    assert state.step == 1 and state.m["w"].shape == (1, 2) and state.v["w"].shape == (1, 2)


def test_adam_one_step_on_square():
    w = {"w": np.array([[1.0]])}
    state = nc.AdamState({"default": 0.1})
    nc.adam_step(state, w, {"w": 2.0 * w["w"]})
    # bias-corrected first step moves by lr * g / (|g| + eps)
    assert abs(w["w"][0, 0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))) <= 1e-12
    assert abs(w["w"][0, 0] - 0.9) <= 1e-9


def test_adam_group_learning_rates():
    params = {"head.w": np.zeros((2, 2)), "encoder.w": np.zeros((2, 2))}
    state = nc.AdamState({"head": 5e-4, "encoder": 5e-6}, {"head.w": "head", "encoder.w": "encoder"})
    g = np.array([[1.0, -3.0], [0.5, 2.0]])
    nc.adam_step(state, params, {"head.w": g, "encoder.w": g})
    np.testing.assert_allclose(params["head.w"], 100.0 * params["encoder.w"], rtol=1e-12)


def test_adam_step_counter_and_errors():
    params = {"w": np.zeros((1, 1))}
    state = nc.AdamState({"default": 1e-3})
    for expected in (1, 2, 3):
        nc.adam_step(state, params, {"w": np.ones((1, 1))})
        assert state.step == expected
    with pytest.raises(nc.ShapeError):
        nc.adam_step(state, params, {"w": np.ones((2, 1))})
    with pytest.raises(nc.NonFiniteError):
        nc.adam_step(state, params, {"w": np.full((1, 1), np.nan)})
    assert state.step == 3
    with pytest.raises(KeyError):
        nc.adam_step(nc.AdamState({"head": 1.0}), params, {"w": np.ones((1, 1))})


# --- randomness -------------------------------------------------------------


def test_sample_gaussian_contract():
    with pytest.raises(ValueError):
        nc.sample_gaussian((2, 2), 0.0, nc.make_rng(0))
    a = nc.sample_gaussian((3, 4), 1.0, nc.make_rng(5))
    b = nc.sample_gaussian((3, 4), 1.0, nc.make_rng(5))
    np.testing.assert_array_equal(a, b)
    big = nc.sample_gaussian((100_000,), 1.0, nc.make_rng(1))
    assert abs(big.mean()) < 0.02
    assert abs(big.var() - 1.0) < 0.05


def test_dropout_mask_contract():
    np.testing.assert_array_equal(nc.dropout_mask((3, 3), 0.0, nc.make_rng(0)), np.ones((3, 3)))
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            nc.dropout_mask((2, 2), bad, nc.make_rng(0))
    a = nc.dropout_mask((50, 50), 0.1, nc.make_rng(3))
    np.testing.assert_array_equal(a, nc.dropout_mask((50, 50), 0.1, nc.make_rng(3)))
    assert not np.array_equal(a, nc.dropout_mask((50, 50), 0.1, nc.make_rng(4)))
    big = nc.dropout_mask((100_000,), 0.1, nc.make_rng(2))
    assert abs(np.mean(big == 0) - 0.1) < 0.01
    np.testing.assert_allclose(np.unique(big), [0.0, 1.0 / 0.9])


def test_zero_rate_dropout_is_identity():
    t = nc.Tape()
    x = t.constant(np.arange(6.0).reshape(2, 3))
    out = nc.apply_mask(x, nc.dropout_mask((2, 3), 0.0, nc.make_rng(0)))
    np.testing.assert_array_equal(out.value, x.value)


# --- properties ---------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    arrays(float, 4, elements=finite),
    arrays(float, 4, elements=finite),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)
def test_cosine_scale_invariance(a, b, alpha, beta):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    t = nc.Tape()
    base = nc.row_cosine(t.constant(a), t.constant(b)).value[0, 0]
    scaled = nc.row_cosine(t.constant(alpha * a), t.constant(beta * b)).value[0, 0]
    assert abs(base - scaled) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 4), elements=finite))
def test_normalized_rows_have_unit_norm(x):
    if np.any(np.linalg.norm(x, axis=1) < 1e-3):
        return
    out = nc.l2_normalize(nc.Tape().constant(x)).value
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
