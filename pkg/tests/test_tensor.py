import numpy as np
import pytest

from mtkd.errors import ContractError, DimensionError
from mtkd.numcore import ops
from mtkd.numcore.tensor import Tape, Tensor, backward


def test_values_are_row_major_flat():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.values.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert t.size == len(t.values)


def test_sum_gives_unit_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_mse_against_zero_single_element():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.mse(x, np.zeros(1))
    tape.backward(loss)
    assert loss.item() == 4.0
    assert x.grad.tolist() == [4.0]


def test_shared_input_gradients_add():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), ops.mul(x, 3.0)))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_leaf_gradients_accumulate_across_tapes():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, 2.0))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_no_grad_for_frozen_tensor():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, c))
    tape.backward(loss)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, c.data)


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_without_tape_fails():
    with pytest.raises(ContractError):
        backward(Tensor(1.0, requires_grad=True))


def test_records_in_topological_order():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = ops.exp(x)
        z = ops.mul(y, y)
        loss = ops.sum(z)
        order = [r.output for r in tape.records]
    assert order == [y, z, loss]
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * np.exp(2.0))


def test_matmul_dimension_error_names_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(a, b)


def test_operator_sugar_matches_ops():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.5, -1.0], [2.0, 0.0]])
    np.testing.assert_array_equal((a + b).data, a.data + b.data)
    np.testing.assert_array_equal((a - b).data, a.data - b.data)
    np.testing.assert_array_equal((a * b).data, a.data * b.data)
    np.testing.assert_array_equal((a @ b).data, a.data @ b.data)
    np.testing.assert_array_equal((-a).data, -a.data)
    np.testing.assert_array_equal((a / 2).data, a.data / 2)
    np.testing.assert_array_equal(a.T.data, a.data.T)
