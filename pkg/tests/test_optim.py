#!/usr/bin/env python3

import numpy as np
import pytest

from dynamic_portfolio import optim
from dynamic_portfolio.policy_net import MlpParams


def _params(values) -> MlpParams:
    return MlpParams([(np.array([values], dtype=float), np.zeros(1))])


# --- Enum --- #

@pytest.mark.parametrize("value, expected", [
    ("sgd", optim.OptimizerKind.SGD),
    ("adam", optim.OptimizerKind.ADAM),
    ("rmsprop", optim.OptimizerKind.RMSPROP),
    (optim.OptimizerKind.ADAM, optim.OptimizerKind.ADAM),
])
def test_optimizer_kind_coerce(value, expected):
    assert optim.OptimizerKind.coerce(value) is expected
    assert str(expected) == expected.value


def test_optimizer_kind_invalid():
    with pytest.raises(ValueError):
        optim.OptimizerKind.coerce("lbfgs")


@pytest.mark.parametrize("kind, cls", [
    ("sgd", optim.SGD),
    ("adam", optim.Adam),
    ("rmsprop", optim.RMSprop),
])
def test_make_optimizer(kind, cls):
    opt = optim.make_optimizer(kind, 0.01)
    assert isinstance(opt, cls)
    assert opt.lr == 0.01


def test_learning_rate_must_be_positive():
    with pytest.raises(ValueError):
        optim.SGD(0.0)


# --- Steps --- #

def test_sgd_ascent_and_descent():
    params, grads = _params([1.0, 2.0]), _params([0.5, -1.0])
    up = optim.SGD(0.1).step(params, grads, ascend=True)
    down = optim.SGD(0.1).step(params, grads)
    np.testing.assert_allclose(up.layers[0][0], [[1.05, 1.9]])
    np.testing.assert_allclose(down.layers[0][0], [[0.95, 2.1]])


def test_adam_first_step_is_lr_times_sign():
    params, grads = _params([0.0, 0.0]), _params([3.0, -0.2])
    out = optim.Adam(0.01).step(params, grads)
    np.testing.assert_allclose(out.layers[0][0], [[-0.01, 0.01]], rtol=1e-6)


@pytest.mark.parametrize("opt", [optim.SGD(0.1), optim.Adam(0.05), optim.RMSprop(0.05)])
def test_optimizers_minimize_quadratic(opt):
    params = _params([3.0, -2.0])
    for _ in range(1000):
        params = opt.step(params, params)  # gradient of ½‖θ‖²
    assert params.norm() < 0.1


def test_step_shape_mismatch():
    with pytest.raises(ValueError):
        optim.SGD(0.1).step(_params([1.0]), _params([1.0, 2.0]))


# --- Clipping --- #

def test_clip_grad_norm_scales_down():
    grads = _params([3.0, 4.0])
    clipped, norm = optim.clip_grad_norm(grads, 0.5)
    assert norm == pytest.approx(5.0)
    assert clipped.norm() == pytest.approx(0.5)
    np.testing.assert_allclose(clipped.layers[0][0], [[0.3, 0.4]])


def test_clip_grad_norm_leaves_small_gradients():
    grads = _params([0.1, 0.1])
    clipped, _ = optim.clip_grad_norm(grads, 0.5)
    assert clipped is grads


def test_clip_grad_norm_rejects_non_positive():
    with pytest.raises(ValueError):
        optim.clip_grad_norm(_params([1.0]), 0.0)
