import numpy as np
import pytest

from app.optimizer import AdamW, OptimizerState, adamw_step


def test_zero_gradient_without_decay_keeps_params():
    params = np.array([1.0, -2.0])
    state = OptimizerState.zeros_like(params, weight_decay=0.0)
    new, accepted = adamw_step(state, params, np.zeros(2))
    assert accepted
    np.testing.assert_array_equal(new, params)


def test_first_step_value():
    state = OptimizerState.zeros_like(np.ones(1), lr=0.1, weight_decay=0.0)
    new, _ = adamw_step(state, np.ones(1), np.ones(1))
    assert new[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8))
    assert state.t == 1


def test_decoupled_weight_decay():
    state = OptimizerState.zeros_like(np.ones(1), lr=0.1, weight_decay=0.01)
    new, _ = adamw_step(state, np.ones(1), np.zeros(1))
    assert new[0] == pytest.approx(1.0 - 0.1 * 0.01)


def test_non_finite_gradient_is_rejected():
    params = np.ones(3)
    state = OptimizerState.zeros_like(params)
    new, accepted = adamw_step(state, params, np.array([1.0, np.nan, 0.0]))
    assert not accepted
    assert new is params
    assert state.t == 0
    assert state.rejected == 1
    np.testing.assert_array_equal(state.m, np.zeros(3))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step(OptimizerState.zeros_like(np.ones(2)), np.ones(2), np.ones(3))


def test_trajectory_is_deterministic():
    def trajectory():
        params = np.array([0.5, -0.5])
        state = OptimizerState.zeros_like(params)
        for i in range(5):
            params, _ = adamw_step(state, params, np.sin(params + i))
        return params

    np.testing.assert_array_equal(trajectory(), trajectory())


def test_second_moment_non_negative():
    rng = np.random.default_rng(0)
    params = rng.standard_normal(4)
    state = OptimizerState.zeros_like(params)
    for _ in range(10):
        params, _ = adamw_step(state, params, rng.standard_normal(4))
    assert np.all(state.v >= 0)


def test_named_adamw_keeps_params_without_gradient():
    opt = AdamW(lr=0.1)
    params = {"a": np.ones(2), "b": np.zeros(2)}
    updated = opt.step(params, {"a": np.ones(2), "b": None})
    assert updated["b"] is params["b"]
    assert np.all(updated["a"] < 1.0)
    assert set(opt.states) == {"a"}


def test_module_docstring():
    import app.optimizer

    assert app.optimizer.__doc__.strip().startswith("AdamW")
