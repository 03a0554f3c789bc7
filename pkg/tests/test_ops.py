import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mtkd.errors import DimensionError, NumericError, ParameterError
from mtkd.numcore import ops
from mtkd.numcore.rng import Rng
from mtkd.numcore.tensor import Tape, Tensor

finite = st.floats(-20, 20, allow_nan=False, width=64)


def matrices(rows=st.integers(1, 5), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: hnp.arrays(np.float64, s, elements=finite))


def test_matmul_identity_and_scalar():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert ops.matmul(eye, b).data.tolist() == [[3, 4], [5, 6]]
    assert ops.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = Rng(3)
    a, b = rng.normal((3, 4)), rng.normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            s = 0.0
            for k in range(4):
                s += a[i, k] * b[k, j]
            ref[i, j] = s
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-12)


def test_matmul_backward_rule():
    rng = Rng(4)
    a = Tensor(rng.normal((3, 4)), requires_grad=True)
    b = Tensor(rng.normal((4, 2)), requires_grad=True)
    g = rng.normal((3, 2))
    with Tape() as tape:
        loss = ops.sum(ops.mul(ops.matmul(a, b), Tensor(g)))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


@pytest.mark.parametrize("row,t,expected", [
    ([0.0, 0.0], 3.7, [0.5, 0.5]),
    ([math.log(2), 0.0], 1.0, [2 / 3, 1 / 3]),
    ([2.0, 0.0], 2.0, [math.e / (math.e + 1), 1 / (math.e + 1)]),
])
def test_softmax_rows_examples(row, t, expected):
    np.testing.assert_allclose(ops.softmax_rows(Tensor([row]), t).data[0], expected, rtol=1e-12)


def test_softmax_rejects_bad_temperature_and_nan():
    with pytest.raises(ParameterError):
        ops.softmax_rows(Tensor([[1.0, 2.0]]), 0.0)
    with pytest.raises(ParameterError):
        ops.softmax(Tensor([[1.0, 2.0]]), -1.0)
    with pytest.raises(NumericError):
        ops.softmax_rows(Tensor([[1.0, float("nan")]]), 1.0)


@given(matrices(), st.floats(0.05, 20))
def test_softmax_rows_properties(z, t):
    p = ops.softmax_rows(Tensor(z), t).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    # argmax invariant under temperature, wherever the top gap survives exp() in float64
    top = z.max(axis=1, keepdims=True)
    unique = (z >= top - 1e-6 * t).sum(axis=1) == 1
    assert np.array_equal(p.argmax(axis=1)[unique], z.argmax(axis=1)[unique])


@given(matrices(), finite)
def test_softmax_shift_invariant(z, c):
    np.testing.assert_allclose(ops.softmax_rows(Tensor(z), 1.0).data, ops.softmax_rows(Tensor(z + c), 1.0).data,
                               atol=1e-9)


def test_softmax_mask_gives_exact_zeros():
    z = Tensor([[1.0, 5.0, -2.0]])
    p = ops.softmax(z, mask=np.array([[True, False, True]])).data[0]
    assert p[1] == 0.0
    np.testing.assert_allclose(p[[0, 2]], np.exp([1.0, -2.0]) / np.exp([1.0, -2.0]).sum())


@pytest.mark.parametrize("target,pred,expected", [
    ([1.0, 0.0], [1.0, 0.0], 0.0),
    ([1.0, 0.0], [0.5, 0.5], math.log(2)),
    ([0.5, 0.5], [0.5, 0.5], math.log(2)),
])
def test_cross_entropy_examples(target, pred, expected):
    assert ops.cross_entropy(np.array(target), Tensor(pred)).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_floor_and_dimension_error():
    assert ops.cross_entropy(np.array([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(DimensionError):
        ops.cross_entropy(np.array([1.0, 0.0, 0.0]), Tensor([0.5, 0.5]))


@given(st.integers(2, 8).flatmap(lambda c: st.tuples(st.integers(0, c - 1), hnp.arrays(np.float64, c, elements=finite))))
def test_cross_entropy_one_hot_is_neg_log_gold(case):
    gold, z = case
    p = ops.softmax(Tensor(z)).data
    onehot = np.eye(len(z))[gold]
    ce = ops.cross_entropy(onehot, Tensor(p)).item()
    assert ce >= 0
    assert ce == pytest.approx(-math.log(max(p[gold], 1e-12)), rel=1e-9, abs=1e-12)


def test_softmax_cross_entropy_matches_probability_route():
    rng = Rng(5)
    z = rng.normal((4, 3))
    y = np.eye(3)[[0, 2, 1, 1]]
    a = ops.softmax_cross_entropy(y, Tensor(z), 1.7).data
    b = ops.cross_entropy(y, ops.softmax(Tensor(z), 1.7)).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_mse_examples_and_element_loop():
    assert ops.mse(Tensor([[1.0]]), Tensor([[3.0]])).item() == 4.0
    rng = Rng(6)
    a, b = rng.normal((2, 3)), rng.normal((2, 3))
    ref = 0.0
    for i in range(2):
        for j in range(3):
            ref += (a[i, j] - b[i, j]) ** 2
    assert ops.mse(Tensor(a), Tensor(b)).item() == pytest.approx(ref / 6, rel=1e-12)
    with pytest.raises(DimensionError):
        ops.mse(Tensor(a), Tensor(b.T))


@given(matrices())
def test_mse_symmetric_and_zero_on_self(a):
    b = a[::-1].copy()
    assert ops.mse(Tensor(a), Tensor(b)).item() == ops.mse(Tensor(b), Tensor(a)).item()
    assert ops.mse(Tensor(a), Tensor(a)).item() == 0.0


def test_masked_mse_ignores_masked_rows():
    a = Tensor(np.zeros((1, 3, 2)))
    b = Tensor(np.array([[[1.0, 1.0], [2.0, 0.0], [99.0, -99.0]]]))
    mask = np.array([[True, True, False]])
    assert ops.masked_mse(a, b, mask).item() == pytest.approx((1 + 1 + 4 + 0) / 4)


def _layer_norm_ref(x, gain, bias, eps=1e-5):
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        row = x[r]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for c in range(len(row)):
            out[r, c] = (row[c] - mu) / math.sqrt(var + eps) * gain[c] + bias[c]
    return out


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(ops.layer_norm(Tensor([[3.0, 3.0]]), one, zero).data, [[0.0, 0.0]])
    np.testing.assert_allclose(ops.layer_norm(Tensor([[1.0, -1.0]]), one, zero).data, [[1.0, -1.0]], atol=1e-5)
    rng = Rng(7)
    x, g, b = rng.normal((4, 8)), rng.normal(8), rng.normal(8)
    np.testing.assert_allclose(ops.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, _layer_norm_ref(x, g, b),
                               rtol=1e-10, atol=1e-12)


def test_dropout_is_inverted_and_zero_rate_identity():
    x = Tensor(np.ones((2, 4)))
    keep = np.array([[True, False, True, True], [False, True, True, True]])
    out = ops.dropout(x, keep, 0.25).data
    np.testing.assert_allclose(out, keep / 0.75)
    assert np.array_equal(ops.dropout(x, np.ones((2, 4), bool), 0.0).data, x.data)
    with pytest.raises(ParameterError):
        ops.dropout(x, keep, 1.0)


def test_tempered_path_bitwise_equals_untempered_at_t1():
    z = Tensor(Rng(8).normal((5, 4)))
    assert np.array_equal(ops.softmax(z, 1.0).data, ops.softmax(z).data)
    assert np.array_equal(ops.log_softmax(z, 1.0).data, ops.log_softmax(z).data)


def test_gelu_tanh_form():
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, rtol=1e-12)
