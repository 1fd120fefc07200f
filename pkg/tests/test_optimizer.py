# tests/test_optimizer.py

import numpy as np
import pytest

from scene_text_pipeline.nn.optimizer import AdadeltaState, adadelta_step
from scene_text_pipeline.services.errors import ConfigError, NonFiniteValue, ShapeMismatch


def test_zero_gradient_only_decays_accumulators():
    params = {"w": np.array([1.0, -2.0])}
    state = AdadeltaState({"w": np.array([0.4, 0.2])}, {"w": np.array([0.1, 0.3])})
    adadelta_step(params, {"w": np.zeros(2)}, state, rho=0.9, eps=1e-6)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_allclose(state.accum_grad["w"], [0.36, 0.18])
    np.testing.assert_allclose(state.accum_update["w"], [0.09, 0.27])


def test_first_step_formula():
    rho, eps, g = 0.95, 1e-6, 0.5
    params = {"w": np.array([1.0])}
    state = AdadeltaState.zeros_like(params)
    adadelta_step(params, {"w": np.array([g])}, state, rho=rho, eps=eps)
    dx = -np.sqrt(eps) / np.sqrt((1 - rho) * g * g + eps) * g
    assert params["w"][0] == pytest.approx(1.0 + dx, rel=1e-12)
    assert state.accum_grad["w"][0] == pytest.approx((1 - rho) * g * g)
    assert state.accum_update["w"][0] == pytest.approx((1 - rho) * dx * dx)


def test_updates_oppose_the_gradient(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
    adadelta_step(params, grads, AdadeltaState.zeros_like(params))
    for name in params:
        step = params[name] - before[name]
        assert np.all(step * grads[name] <= 0.0)


def test_descends_a_quadratic():
    params = {"x": np.array([3.0, -4.0])}
    state = AdadeltaState.zeros_like(params)
    for _ in range(2000):
        adadelta_step(params, {"x": 2.0 * params["x"]}, state, rho=0.9, eps=1e-4)
    assert np.linalg.norm(params["x"]) < 2.5


def test_invalid_hyperparameters():
    params = {"w": np.zeros(1)}
    for rho, eps in ((1.0, 1e-6), (0.0, 1e-6), (0.9, 0.0)):
        with pytest.raises(ConfigError):
            adadelta_step(params, {"w": np.zeros(1)}, AdadeltaState.zeros_like(params), rho=rho, eps=eps)


def test_mismatched_names_and_shapes():
    params = {"w": np.zeros(2)}
    with pytest.raises(ShapeMismatch):
        adadelta_step(params, {"v": np.zeros(2)}, AdadeltaState.zeros_like(params))
    with pytest.raises(ShapeMismatch):
        adadelta_step(params, {"w": np.zeros(3)}, AdadeltaState.zeros_like(params))


def test_non_finite_gradient():
    params = {"w": np.zeros(2)}
    with pytest.raises(NonFiniteValue):
        adadelta_step(params, {"w": np.array([np.nan, 0.0])}, AdadeltaState.zeros_like(params))


def test_state_tensor_round_trip(rng):
    state = AdadeltaState({"conv1.weight": rng.normal(size=(2, 3))}, {"conv1.weight": rng.normal(size=(2, 3))})
    tensors = state.to_tensors()
    assert set(tensors) == {"opt/conv1.weight/accum_grad", "opt/conv1.weight/accum_update"}
    back = AdadeltaState.from_tensors({**tensors, "fc.bias": np.zeros(3)})
    np.testing.assert_array_equal(back.accum_grad["conv1.weight"], state.accum_grad["conv1.weight"])
    np.testing.assert_array_equal(back.accum_update["conv1.weight"], state.accum_update["conv1.weight"])
