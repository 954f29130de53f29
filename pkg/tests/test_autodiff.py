import numpy as np
import pytest

from app import autodiff as ad
from app.autodiff import DimensionError, NonFiniteError, Tape, Tensor, numerical_gradient, relative_error


def grad_error(build, x):
    """Relative error between tape gradients and central differences of build(x)."""
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = build(t)
    tape.backward(loss)
    numeric = numerical_gradient(lambda v: float(build(Tensor(v)).data), x)
    return relative_error(t.grad, numeric)


@pytest.mark.parametrize("build", [
    lambda t: ad.sum(t * t * 3.0),
    lambda t: ad.sum(ad.exp(t) / (1.0 + t * t)),
    lambda t: ad.sum(ad.log(t * t + 1.0)),
    lambda t: ad.sum(ad.sqrt(t * t + 0.5)),
    lambda t: ad.sum(ad.gelu(t)),
    lambda t: ad.sum(-t * 2.0 - 1.0),
    lambda t: ad.mean(ad.softmax(t, axis=-1) * np.arange(4.0)),
    lambda t: ad.sum(ad.logsumexp(t, axis=0)),
    lambda t: ad.sum(ad.normalize_rows(t) * np.linspace(-1, 1, 4)),
    lambda t: ad.sum(ad.layernorm(t, np.linspace(0.5, 1.5, 4), np.zeros(4)) * np.arange(4.0)),
    lambda t: ad.sum(ad.matmul(t, ad.transpose(t))),
    lambda t: ad.sum(ad.reshape(t, (4, 3)) * np.arange(12.0).reshape(4, 3)),
    lambda t: ad.sum(ad.concat([t, t * 2.0], axis=0) * np.arange(24.0).reshape(6, 4)),
    lambda t: ad.sum(t[np.array([0, 0, 2])] * 1.5),
    lambda t: ad.sum(t[1:, :2]),
    lambda t: ad.sum(ad.broadcast_to(ad.reshape(t, (1, 3, 4)), (2, 3, 4)) * 0.5),
    lambda t: ad.sum(ad.elementwise(t, "mul", np.arange(4.0))),
])
def test_gradients_match_finite_differences(build):
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert grad_error(build, x) <= 1e-3


def test_broadcast_gradient_sums_back_to_input_shape():
    row = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.add(np.ones((4, 3)), row))
    tape.backward(loss)
    np.testing.assert_array_equal(row.grad, [4.0, 4.0, 4.0])


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        loss = x * x + x
    tape.backward(loss)
    assert x.grad == pytest.approx(7.0)


def test_constants_are_not_recorded():
    with Tape() as tape:
        ad.sum(Tensor(np.ones(3)) * 2.0)
    assert tape.nodes == []


def test_ops_outside_tape_are_constant():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_backward_on_leaf_loss_gives_unit_gradient():
    x = Tensor(np.array(5.0), requires_grad=True)
    Tape().backward(x)
    assert x.grad == 1.0


def test_sqrt_has_zero_subgradient_at_zero():
    x = Tensor(np.zeros(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.sqrt(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_normalize_rows_zero_row_stays_zero_without_gradient():
    x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    with Tape() as tape:
        unit = ad.normalize_rows(x)
        loss = ad.sum(unit * np.array([1.0, 2.0]))
    tape.backward(loss)
    np.testing.assert_array_equal(unit.data[0], [0.0, 0.0])
    np.testing.assert_allclose(unit.data[1], [0.6, 0.8])
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])


def test_softmax_rejects_non_finite_input():
    with pytest.raises(NonFiniteError):
        ad.softmax(np.array([1.0, np.inf]))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_item_requires_single_element():
    assert Tensor(np.array([2.5])).item() == 2.5
    with pytest.raises(DimensionError):
        Tensor(np.ones(2)).item()


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        ad.elementwise(np.ones(2), "tanh")


def test_gelu_values():
    out = ad.gelu(np.array([0.0, 1.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.8413447460685429)


def test_relative_error_floor():
    assert relative_error(np.array([1e-12]), np.array([0.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
