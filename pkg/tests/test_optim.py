import math

import numpy as np
import pytest

from knnmoco.autodiff import Tensor
from knnmoco.errors import NumericError
from knnmoco.optim import OptimizerState, cosine_lr, sgd_step


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_lr(0.3, 0, 100) == pytest.approx(0.3)
    assert cosine_lr(0.3, 50, 100) == pytest.approx(0.15)
    assert cosine_lr(0.3, 100, 100) == pytest.approx(0.0, abs=1e-15)


def test_zero_lr_leaves_params_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([5.0, 5.0])
    state = OptimizerState(base_lr=0.0, momentum=0.9, total_steps=10)
    sgd_step({"p": p}, state)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_plain_gradient_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.5])
    state = OptimizerState(base_lr=1.0, momentum=0.0, weight_decay=0.0, total_steps=1000)
    sgd_step({"p": p}, state)
    assert p.data[0] == pytest.approx(0.5)


def test_velocity_update_rule():
    # v <- mu*v + g + wd*p ; p <- p - lr*v, checked against a manual replay
    p = Tensor([2.0], requires_grad=True)
    state = OptimizerState(base_lr=0.1, momentum=0.9, weight_decay=0.01, total_steps=0)
    v_ref, p_ref = 0.0, 2.0
    for g in [0.3, -0.2, 0.7]:
        p.grad = np.array([g])
        sgd_step({"p": p}, state)
        v_ref = 0.9 * v_ref + g + 0.01 * p_ref
        p_ref = p_ref - 0.1 * v_ref
        assert p.data[0] == pytest.approx(p_ref, rel=1e-12)
        p.zero_grad()


def test_missing_grad_is_treated_as_zero():
    p = Tensor([1.0], requires_grad=True)
    state = OptimizerState(base_lr=1.0, momentum=0.0, total_steps=0)
    sgd_step({"p": p}, state)
    assert p.data[0] == pytest.approx(1.0)


def test_nonfinite_grad_raises():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([math.inf])
    with pytest.raises(NumericError):
        sgd_step({"p": p}, OptimizerState(base_lr=0.1, total_steps=1))


def test_lr_decays_over_run():
    state = OptimizerState(base_lr=0.3, total_steps=4)
    lrs = []
    p = Tensor([0.0], requires_grad=True)
    for _ in range(4):
        lrs.append(state.lr())
        sgd_step({"p": p}, state)
    assert lrs == sorted(lrs, reverse=True)
    assert lrs[0] == pytest.approx(0.3)
