import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgen.autodiff import (
    OPERATORS,
    Graph,
    ShapeError,
    Tensor,
    backward,
    finite_diff_gradient,
    op_apply,
    sigmoid,
)


def _value(op, *arrays, **attrs):
    g = Graph()
    ids = [g.const(a) for a in arrays]
    return g.value(g.apply(op, *ids, **attrs))


def test_sigmoid_of_zero_is_half():
    assert sigmoid(0.0) == 0.5
    assert _value("sigmoid", np.array([0.0]))[0] == 0.5


def test_add_and_identity_matvec():
    np.testing.assert_array_equal(_value("add", [1.0, 2.0], [3.0, 4.0]), [4.0, 6.0])
    np.testing.assert_array_equal(_value("matvec", np.eye(2), [5.0, 7.0]), [5.0, 7.0])


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(np.array([-800.0, 800.0]))
    assert out[0] == 0.0 and out[1] == 1.0


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_tensor_is_read_only_copy():
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 9.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 3.0


@pytest.mark.parametrize("op,args", [
    ("add", ([1.0, 2.0], [1.0, 2.0, 3.0])),
    ("mul", (np.ones((2, 3)), np.ones(2))),
    ("matvec", (np.ones((2, 3)), np.ones(2))),
    ("dot", ([1.0], [1.0, 2.0])),
])
def test_shape_mismatch_raises(op, args):
    with pytest.raises(ShapeError):
        _value(op, *args)


def test_unknown_operator_and_arity():
    g = Graph()
    a = g.const([1.0])
    with pytest.raises(ValueError):
        g.apply("tanh", a)
    with pytest.raises(ShapeError):
        g.apply("add", a)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_result_is_rejected():
    g = Graph()
    a = g.const([1e200])
    with pytest.raises(ValueError, match="non-finite"):
        g.apply("square", a)


def test_backward_square_at_three():
    g = Graph()
    x = g.param(np.array(3.0))
    grads = g.backward(g.apply("square", x))
    assert grads[x] == pytest.approx(6.0)


def test_backward_dot_gives_other_operand():
    g = Graph()
    w = g.param([0.3, -1.0])
    grads = backward(g, op_apply(g, "dot", [w, g.const([2.0, 5.0])]))
    np.testing.assert_allclose(grads[w], [2.0, 5.0])


def test_backward_softmax_ce_uniform_logits():
    g = Graph()
    z = g.param([0.0, 0.0])
    grads = g.backward(g.apply("softmax_ce", z, target=0))
    np.testing.assert_allclose(grads[z], [-0.5, 0.5])


def test_backward_rejects_non_scalar_loss():
    g = Graph()
    x = g.param([1.0, 2.0])
    with pytest.raises(ShapeError):
        g.backward(g.apply("square", x))


def test_unused_parameter_gets_zero_gradient():
    g = Graph()
    x = g.param(np.array(2.0))
    unused = g.param([1.0, 1.0])
    grads = g.backward(g.apply("square", x))
    np.testing.assert_array_equal(grads[unused], [0.0, 0.0])


def test_relu_and_l1_subgradient_zero_at_kink():
    g = Graph()
    x = g.param([0.0, 1.0, -1.0])
    grads = g.backward(g.apply("sum", g.apply("relu", x)))
    np.testing.assert_array_equal(grads[x], [0.0, 1.0, 0.0])
    g = Graph()
    x = g.param([0.0, 2.0, -3.0])
    grads = g.backward(g.apply("l1", x))
    np.testing.assert_array_equal(grads[x], [0.0, 1.0, -1.0])


def test_finite_diff_on_square_and_constant():
    assert finite_diff_gradient(lambda x: x[0] ** 2, np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-6)
    np.testing.assert_array_equal(finite_diff_gradient(lambda x: 4.2, np.zeros(3)), np.zeros(3))


def test_softmax_ce_is_negative_log_probability():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 4)) * 3
    t = rng.integers(0, 4, size=6)
    out = _value("softmax_ce", z, target=t)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert (out >= 0).all()
    np.testing.assert_allclose(out, -np.log(p[np.arange(6), t]), atol=1e-12)


# -- every operator against central differences --------------------------------

def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def _scalarize(g, node, weights):
    """Reduce any node to a scalar with fixed random weights so all entries matter."""
    val = g.value(node)
    if val.ndim == 0:
        return node
    return g.apply("sum", g.apply("mul", node, g.const(weights[: val.size].reshape(val.shape))))


def _away_from_kink(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


OP_CASES = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=4)], {}),
    "sub": lambda r: ([r.normal(size=(3, 4)), r.normal(size=4)], {}),
    "mul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "matvec": lambda r: ([r.normal(size=(2, 4)), r.normal(size=(3, 4))], {}),
    "relu": lambda r: ([_away_from_kink(r, (3, 4))], {}),
    "sigmoid": lambda r: ([r.normal(size=5)], {}),
    "softmax": lambda r: ([r.normal(size=(3, 4))], {}),
    "softmax_ce": lambda r: ([r.normal(size=(3, 4))], {"target": r.integers(0, 4, size=3)}),
    "dot": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "square": lambda r: ([r.normal(size=5)], {}),
    "sum": lambda r: ([r.normal(size=(2, 3))], {}),
    "scale": lambda r: ([r.normal(size=4)], {"factor": 1.7}),
    "l1": lambda r: ([_away_from_kink(r, 6)], {}),
}


def test_every_operator_has_a_gradient_case():
    assert set(OP_CASES) == set(OPERATORS)


def _check_operator(op, seed):
    rng = np.random.default_rng(seed)
    inputs, attrs = OP_CASES[op](rng)
    weights = rng.normal(size=64)

    def loss_of(arrays):
        g = Graph()
        ids = [g.param(a) for a in arrays]
        return g, ids, _scalarize(g, g.apply(op, *ids, **attrs), weights)

    g, ids, loss = loss_of(inputs)
    grads = g.backward(loss)
    for k, arr in enumerate(inputs):
        def f(x, k=k):
            args = list(inputs)
            args[k] = x
            gg, _, l = loss_of(args)
            return gg.value(l)

        numeric = finite_diff_gradient(f, arr)
        assert _rel_err(grads[ids[k]], numeric) <= 1e-5, (op, seed, k)


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_operator_gradient_matches_finite_difference(op):
    for seed in range(100):
        _check_operator(op, seed)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    t = rng.integers(0, 3, size=5)

    def run():
        g = Graph()
        wid = g.param(w)
        z = g.apply("matvec", wid, g.const(x))
        loss = g.apply("sum", g.apply("softmax_ce", z, target=t))
        return g.backward(loss)[wid]

    assert run().tobytes() == run().tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_sigmoid_in_unit_interval(xs):
    out = sigmoid(np.array(xs))
    assert ((out >= 0) & (out <= 1)).all()
    np.testing.assert_allclose(out + sigmoid(-np.array(xs)), 1.0, atol=1e-12)
    assert math.isclose(sigmoid(0.0), 0.5)
