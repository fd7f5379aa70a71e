import numpy as np
import pytest

from dmole.autograd import ComputationTape, Tensor, backward, mse_loss
from dmole.errors import ContractError
from dmole.optim import Optimizer, step


def _fit(variant, lr, steps=1000):
    w = Tensor(np.zeros((1, 2)), requires_grad=True, name='w')
    target = np.array([[1.5, -2.0]])
    opt = Optimizer([w], lr, variant=variant)
    for _ in range(steps):
        opt.zero_grad()
        with ComputationTape():
            loss = mse_loss(w, target)
        backward(loss)
        opt.step()
    return w, target


@pytest.mark.parametrize('variant, lr', [('sgd', 0.5), ('adam', 0.05)])
def test_optimizer_converges_on_quadratic(variant, lr):
    w, target = _fit(variant, lr)
    np.testing.assert_allclose(w.data, target, atol=1e-2)


def test_frozen_parameters_are_never_updated():
    w = Tensor(np.ones((1, 2)), requires_grad=True)
    frozen = Tensor(np.ones((1, 2)))
    frozen.grad = np.ones((1, 2))
    opt = Optimizer([w, frozen], 0.1)
    w.grad = np.ones((1, 2))
    opt.step()
    np.testing.assert_array_equal(frozen.data, np.ones((1, 2)))
    assert not np.allclose(w.data, 1.0)


def test_missing_gradient_is_a_contract_error():
    w = Tensor(np.ones((1, 2)), requires_grad=True, name='w')
    w.grad = None
    with pytest.raises(ContractError, match='w'):
        Optimizer([w], 0.1).step()


def test_invalid_settings():
    with pytest.raises(ContractError):
        Optimizer([], 0.0)
    with pytest.raises(ContractError):
        Optimizer([], 0.1, variant='rmsprop')


def test_functional_step_replaces_parameter_set():
    a = Tensor([[1.0]], requires_grad=True)
    b = Tensor([[1.0]], requires_grad=True)
    b.grad = np.array([[1.0]])
    opt = Optimizer([a], 0.5, variant='sgd')
    step(opt, [b])
    assert b.data[0, 0] == pytest.approx(0.5)
    assert a.data[0, 0] == pytest.approx(1.0)


def test_sgd_rule_by_hand():
    p = Tensor([[1.0]], requires_grad=True)
    p.grad = np.array([[2.0]])
    Optimizer([p], 0.1, variant='sgd').step()
    assert p.data[0, 0] == pytest.approx(0.8)


def test_adam_first_step_moves_against_gradient_sign():
    p = Tensor([[1.0, 1.0]], requires_grad=True)
    p.grad = np.array([[3.0, -0.5]])
    Optimizer([p], 0.01).step()
    np.testing.assert_allclose(p.data, [[0.99, 1.01]], atol=1e-6)


def test_step_keeps_gradients_until_zero_grad():
    p = Tensor([[1.0]], requires_grad=True)
    p.grad = np.array([[1.0]])
    opt = Optimizer([p], 0.1, variant='sgd')
    opt.step()
    assert p.grad is not None
    opt.zero_grad()
    np.testing.assert_array_equal(p.grad, [[0.0]])
