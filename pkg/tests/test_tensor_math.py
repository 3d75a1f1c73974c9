import math

import numpy as np
import pytest

from sglstm.errors import DimensionError, ParameterError
from sglstm.tensor_math import (
    init_uniform,
    linear,
    make_rng,
    scaled_tanh_g2,
    scaled_tanh_grad,
    sigmoid,
    softmax,
    tanh_g1,
)


def test_linear_identity():
    np.testing.assert_array_equal(linear(np.eye(3), [1, 2, 3]), [1, 2, 3])


def test_linear_hand_multiplication():
    np.testing.assert_array_equal(linear([[1, 1], [0, 1]], [2, 3]), [5, 3])


def test_linear_zero_matrix_with_bias():
    np.testing.assert_array_equal(linear(np.zeros((2, 2)), [7, 9], [1, 1]), [1, 1])


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2,\)"):
        linear(np.zeros((2, 3)), np.zeros(2))


def test_linear_bad_bias():
    with pytest.raises(DimensionError):
        linear(np.eye(2), [1, 2], [1, 2, 3])


def test_activation_fixed_points():
    assert sigmoid(0.0) == 0.5
    assert tanh_g1(0.0) == 0.0
    assert scaled_tanh_g2(0.0) == 0.0


def test_scaled_tanh_value():
    assert scaled_tanh_g2(1.5) == pytest.approx(1.7159 * math.tanh(1.0))
    assert scaled_tanh_g2(1.5) == pytest.approx(1.3068, abs=1e-4)


def test_sigmoid_matches_logistic_and_saturates():
    x = np.linspace(-30, 30, 121)
    np.testing.assert_allclose(sigmoid(x), 1 / (1 + np.exp(-x)), rtol=1e-12, atol=1e-15)
    with np.errstate(over="raise"):
        assert sigmoid(-1000.0) == 0.0
        assert sigmoid(1000.0) == 1.0


def test_scaled_tanh_grad_matches_finite_difference():
    x = np.linspace(-3, 3, 13)
    h = 1e-6
    numeric = (scaled_tanh_g2(x + h) - scaled_tanh_g2(x - h)) / (2 * h)
    np.testing.assert_allclose(scaled_tanh_grad(x), numeric, rtol=1e-7)


def test_softmax_uniform_cases():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    for c in (-50.0, 0.0, 3.7, 800.0):
        np.testing.assert_allclose(softmax([c] * 4), [0.25] * 4)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)


def test_softmax_rows_and_overflow():
    p = softmax(np.array([[1000.0, 0.0], [0.0, 1000.0]]))
    np.testing.assert_allclose(p, np.eye(2))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        softmax(np.zeros(0))


def test_init_uniform_is_deterministic():
    a = init_uniform((4, 5), 0.08, make_rng(7))
    b = init_uniform((4, 5), 0.08, make_rng(7))
    assert a.tobytes() == b.tobytes()


def test_init_uniform_mean_and_bounds():
    draws = init_uniform((100_000,), 0.08, make_rng(3), np.float64)
    assert abs(draws.mean()) < 0.003
    small = init_uniform((2, 3), 0.08, make_rng(4))
    assert small.size == 6
    assert np.all(np.abs(small) <= 0.08)
    assert small.dtype == np.float32


def test_init_uniform_rejects_nonpositive_range():
    with pytest.raises(ParameterError):
        init_uniform((2,), 0.0, make_rng(0))


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_make_rng_rejects_out_of_range_seed(seed):
    with pytest.raises(ParameterError):
        make_rng(seed)
