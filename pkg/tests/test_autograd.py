import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mciat import autograd as ag
from mciat.autograd import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    out = ag.matmul(Tensor(np.eye(2)), Tensor(np.array([[2.0], [3.0]])))
    np.testing.assert_array_equal(out.data, [[2.0], [3.0]])


def test_concat_and_gather():
    np.testing.assert_array_equal(ag.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1, 2, 3])
    np.testing.assert_array_equal(ag.gather(Tensor([10.0, 20.0, 30.0]), [2, 0]).data, [30, 10])


def test_activation_values():
    np.testing.assert_allclose(ag.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)
    assert ag.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(ag.layer_norm(x).data, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_gelu_is_tanh_form():
    x = np.linspace(-4, 4, 41)
    expected = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(ag.gelu(Tensor(x)).data, expected, rtol=1e-12)


def test_mse_values():
    x = Tensor(np.array([1.0, 2.0]))
    assert ag.mse_loss(x, x.data).item() == 0.0
    assert ag.mse_loss(Tensor(np.zeros(2)), np.ones(2)).item() == 1.0
    assert ag.mse_loss(Tensor(np.array([1.0, 3.0])), np.array([2.0, 5.0])).item() == 2.5


def test_cross_entropy_matches_log_softmax():
    logits = np.array([[1.0, 2.0], [0.5, -1.0]])
    labels = np.array([1, 0])
    expected = -np.mean([logits[i, labels[i]] - np.log(np.exp(logits[i]).sum()) for i in range(2)])
    assert ag.cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected, rel=1e-12)


def test_broadcast_mismatch_raises():
    with pytest.raises(ag.ShapeError):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ag.ShapeError):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_non_finite_activation_input_raises():
    with pytest.raises(FloatingPointError):
        ag.softmax(Tensor(np.array([0.0, np.nan])))


# ---------------------------------------------------------------------------
# backward values


def test_backward_mse_scalar():
    w = leaf([2.0])
    ag.backward(ag.mse_loss(w, np.zeros(1)), [w])
    np.testing.assert_array_equal(w.grad, [4.0])


def test_backward_unused_param_gets_zero():
    w, v = leaf([1.0, 2.0]), leaf([5.0])
    ag.backward(ag.sum_(ag.mul(v, v)), [w, v])
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_backward_sum_of_squares():
    w = leaf([1.0, 2.0])
    ag.backward(ag.sum_(ag.mul(w, w)), [w])
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    with pytest.raises(ag.ShapeError):
        ag.backward(leaf([1.0, 2.0]))


def test_concat_gather_backward_is_permutation_scatter():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0, 5.0])
    idx = np.array([4, 0, 2, 1, 3])
    upstream = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    out = ag.gather(ag.concat([a, b]), idx)
    ag.backward(ag.sum_(ag.mul(out, upstream)), [a, b])
    full = np.zeros(5)
    full[idx] = upstream
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad]), full)


def test_gather_repeated_index_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    ag.backward(ag.sum_(ag.gather(x, [0, 0, 2])), [x])
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_no_grad_builds_no_graph():
    w = leaf([1.0])
    with ag.no_grad():
        y = ag.mul(w, 2.0)
    assert not y.requires_grad


def test_grad_check_constant_function():
    w = leaf([1.0, 2.0])
    assert ag.grad_check(lambda: ag.sum_(ag.mul(Tensor(np.zeros(2)), w.data)), [w]) == 0.0


def test_grad_check_mse_three_elements():
    w = leaf([0.3, -1.2, 2.0])
    assert ag.grad_check(lambda: ag.mse_loss(w, np.array([1.0, 0.0, -1.0])), [w]) < 1e-6


def test_grad_check_rejects_nondeterministic():
    w = leaf([1.0])
    gen = np.random.default_rng(0)
    with pytest.raises(RuntimeError):
        ag.grad_check(lambda: ag.sum_(ag.mul(w, float(gen.random()))), [w])


# ---------------------------------------------------------------------------
# gradient fidelity of every primitive on seeded random inputs


def _contract(op, weights):
    # random positive weights so every output element contributes a distinct gradient
    def f(*xs):
        y = op(*xs)
        return ag.sum_(ag.mul(y, weights[: y.size].reshape(y.shape)))

    return f


UNARY = {
    "exp": ag.exp,
    "log": lambda x: ag.log(ag.add(ag.mul(x, x), 1.0)),
    "sigmoid": ag.sigmoid,
    "gelu": ag.gelu,
    "softmax": lambda x: ag.softmax(x, axis=-1),
    "log_softmax": lambda x: ag.log_softmax(x, axis=-1),
    "layer_norm": ag.layer_norm,
    "transpose": lambda x: ag.transpose(x),
    "reshape": lambda x: ag.reshape(x, (-1,)),
    "mean": lambda x: ag.mean(x, axis=0, keepdims=True),
    "sum": lambda x: ag.sum_(x, axis=1),
    "clip": lambda x: ag.clip(x, -0.5, 0.5),
    "gather": lambda x: ag.gather(x, [2, 0, 0]),
    "take_rows": lambda x: ag.take_rows(ag.reshape(x, (1, 3, 4)), np.array([[2, 0]])),
    "scatter": lambda x: ag.scatter(x, [3, 1, 0], 5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad_check(name):
    gen = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        data = gen.standard_normal((3, 4))
        if name == "clip":
            # keep away from the kinks where the derivative jumps
            data = np.where(np.abs(np.abs(data) - 0.5) < 1e-3, 0.1, data)
        x = leaf(data)
        f = _contract(UNARY[name], gen.uniform(0.5, 1.5, 32))
        worst = max(worst, ag.grad_check(lambda: f(x), [x]))
    assert worst < 1e-5


BINARY = {
    "add": ag.add,
    "sub": ag.sub,
    "mul": ag.mul,
    "div": lambda a, b: ag.div(a, ag.add(ag.mul(b, b), 1.0)),
    "matmul": lambda a, b: ag.matmul(a, ag.transpose(b)),
    "broadcast_add": lambda a, b: ag.add(a, ag.gather(b, [0])),
    "batched_matmul": lambda a, b: ag.matmul(ag.reshape(a, (3, 2, 2)), ag.reshape(b, (3, 2, 2))),
    "concat": lambda a, b: ag.concat([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_grad_check(name):
    gen = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        a, b = leaf(gen.standard_normal((3, 4))), leaf(gen.standard_normal((3, 4)))
        f = _contract(BINARY[name], gen.uniform(0.5, 1.5, 32))
        worst = max(worst, ag.grad_check(lambda: f(a, b), [a, b]))
    assert worst < 1e-5


def test_cross_entropy_grad_check():
    gen = np.random.default_rng(3)
    logits = leaf(gen.standard_normal((5, 3)))
    labels = np.array([0, 2, 1, 1, 0])
    assert ag.grad_check(lambda: ag.cross_entropy(logits, labels), [logits]) < 1e-5


# ---------------------------------------------------------------------------
# properties


finite = st.floats(-50, 50, allow_nan=False)


@given(st.lists(finite, min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(values, c):
    x = np.array(values)
    np.testing.assert_allclose(ag.softmax(Tensor(x + c)).data, ag.softmax(Tensor(x)).data, atol=1e-9)


@given(st.lists(finite, min_size=2, max_size=8))
def test_softmax_is_distribution(values):
    p = ag.softmax(Tensor(np.array(values))).data
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8).filter(lambda v: np.ptp(v) > 1e-3))
def test_layer_norm_zero_mean_unit_variance(values):
    y = ag.layer_norm(Tensor(np.array(values))).data
    assert y.mean() == pytest.approx(0.0, abs=1e-9)
    assert y.var() == pytest.approx(1.0, rel=1e-2)
