# tests/test_recurrent.py

import numpy as np
import pytest
from scipy.special import expit

from scene_text_pipeline.nn import recurrent
from scene_text_pipeline.nn.gradcheck import check_blstm
from scene_text_pipeline.services.errors import ShapeMismatch


def random_params(rng, dim, hidden, scale=0.5):
    return {
        "W": rng.normal(scale=scale, size=(4 * hidden, dim)),
        "U": rng.normal(scale=scale, size=(4 * hidden, hidden)),
        "b": rng.normal(scale=scale, size=4 * hidden),
    }


def test_zero_weights_give_zero_outputs():
    zeros = {"W": np.zeros((8, 3)), "U": np.zeros((8, 2)), "b": np.zeros(8)}
    y, _ = recurrent.blstm_layer(np.ones((5, 3)), zeros, zeros)
    assert y.shape == (5, 4)
    np.testing.assert_array_equal(y, 0.0)


def test_single_step_matches_gate_equations():
    params = {"W": np.array([[0.5], [1.0], [-0.5], [2.0]]), "U": np.zeros((4, 1)), "b": np.array([0.0, 1.0, 0.0, 0.0])}
    y, _ = recurrent.lstm_forward(np.array([[1.0]]), params)
    i, o, g = expit(0.5), expit(-0.5), np.tanh(2.0)
    assert y[0, 0] == pytest.approx(o * np.tanh(i * g), abs=1e-12)


def test_reversal_symmetry(rng):
    x = rng.normal(size=(6, 3))
    fwd, bwd = random_params(rng, 3, 2), random_params(rng, 3, 2)
    y, _ = recurrent.blstm_layer(x, fwd, bwd)
    swapped, _ = recurrent.blstm_layer(x[::-1], bwd, fwd)
    flipped = y[::-1]
    np.testing.assert_allclose(swapped, np.concatenate([flipped[:, 2:], flipped[:, :2]], axis=1), atol=1e-12)


def test_backward_direction_sees_future(rng):
    x = rng.normal(size=(5, 2))
    fwd, bwd = random_params(rng, 2, 3), random_params(rng, 2, 3)
    y, _ = recurrent.blstm_layer(x, fwd, bwd)
    changed = x.copy()
    changed[-1] += 1.0
    y2, _ = recurrent.blstm_layer(changed, fwd, bwd)
    np.testing.assert_array_equal(y2[:-1, :3], y[:-1, :3])
    assert not np.allclose(y2[0, 3:], y[0, 3:])


def test_outputs_are_bounded(rng):
    y, _ = recurrent.blstm_layer(rng.normal(0.0, 10.0, size=(20, 4)), random_params(rng, 4, 3, 2.0), random_params(rng, 4, 3, 2.0))
    assert np.all(np.abs(y) < 1.0)


def test_input_width_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        recurrent.lstm_forward(rng.normal(size=(4, 5)), random_params(rng, 3, 2))


def test_blstm_gradients(f64):
    assert check_blstm(seed=2).passed(1e-5)
    assert check_blstm(seed=9, steps=7, dim=2, hidden=3).passed(1e-5)
