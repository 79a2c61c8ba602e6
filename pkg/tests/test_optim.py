import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hytnas.optim import SGD, Adam, cosine_lr, poly_lr
from hytnas.tensor import Parameter


def _param(value, name="p"):
    return Parameter(np.array([value]), name=name)


def test_sgd_single_step_plain():
    p = _param(1.0)
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step({"p": np.array([1.0])})
    np.testing.assert_allclose(p.data, [0.9])


def test_sgd_two_momentum_steps():
    # v1 = 1, v2 = 0.9 + 1 = 1.9 -> p = 1 - 0.1 - 0.19 = 0.71
    p = _param(1.0)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    opt.step({"p": np.array([1.0])})
    opt.step({"p": np.array([1.0])})
    np.testing.assert_allclose(p.data, [0.71])


def test_sgd_weight_decay_adds_to_gradient():
    p = _param(2.0)
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5).step({"p": np.array([0.0])})
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * (0.5 * 2.0)])


def test_sgd_matches_vanilla_descent_when_plain():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=(4,)), name="p")
    ref = p.data.copy()
    opt = SGD([p], lr=0.05, momentum=0.0, weight_decay=0.0)
    for step in range(5):
        g = rng.normal(size=(4,))
        opt.step({"p": g})
        ref = ref - 0.05 * g
    np.testing.assert_array_equal(p.data, ref)


def test_sgd_shape_mismatch_raises():
    p = _param(1.0)
    with pytest.raises(ValueError):
        SGD([p], lr=0.1).step({"p": np.ones(3)})


def test_adam_zero_gradient_leaves_params():
    p = _param(1.0)
    Adam([p], lr=0.001, weight_decay=0.0).step({"p": np.array([0.0])})
    np.testing.assert_allclose(p.data, [1.0])


def test_adam_single_step_hand_value():
    # bias correction makes m_hat = v_hat = 1 at t=1
    p = _param(1.0)
    Adam([p], lr=0.001).step({"p": np.array([1.0])})
    assert p.data[0] == pytest.approx(0.999, abs=1e-8)


def test_schedule_endpoints_and_midpoints():
    assert cosine_lr(0, 100, 0.025, 0.001) == 0.025
    assert cosine_lr(100, 100, 0.025, 0.001) == 0.001
    assert cosine_lr(50, 100, 1.0, 0.0) == pytest.approx(0.5)
    assert poly_lr(0, 1000, 0.1, 0.9) == 0.1
    assert poly_lr(1000, 1000, 0.1, 0.9) == 0.0
    assert poly_lr(500, 1000, 0.1, 1.0) == pytest.approx(0.05)


def test_schedules_reject_bad_arguments():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.025, 0.001)
    with pytest.raises(ValueError):
        poly_lr(0, 0, 0.1, 0.9)
    with pytest.raises(ValueError):
        cosine_lr(5, 4, 0.025, 0.001)


@given(st.integers(min_value=1, max_value=500))
def test_cosine_is_monotone_non_increasing(total):
    values = [cosine_lr(s, total, 0.025, 0.001) for s in range(total + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))
    assert math.isclose(values[0], 0.025) and math.isclose(values[-1], 0.001)
