import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import op_grad_setups
from knnmoco import autodiff as ad
from knnmoco.autodiff import Tensor, grad_check
from knnmoco.errors import NumericError, ShapeError


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, np.eye(2))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_l2_normalize_hand_value():
    out = ad.l2_normalize(Tensor([[3.0, 4.0]]))
    assert np.allclose(out.data, [[0.6, 0.8]], atol=1e-12)


def test_l2_normalize_zero_vector_is_hard_error():
    with pytest.raises(NumericError):
        ad.l2_normalize(Tensor([[0.0, 0.0]]))


def test_softmax_ce_closed_form():
    out = ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_softmax_ce_nonnegative(rng):
    for _ in range(20):
        logits = Tensor(rng.standard_normal((5, 7)))
        targets = rng.integers(0, 7, 5)
        assert ad.softmax_cross_entropy(logits, targets).item() >= 0.0


def test_gradcheck_square_function():
    x = Tensor([3.0], requires_grad=True)

    def f():
        flat = ad.reshape(x, (1, 1))
        return ad.mean(ad.matmul(flat, flat))  # x * x

    err = grad_check(f, [x], eps=1e-5)
    x.zero_grad()
    out = f()
    out.backward()
    assert x.grad[0] == pytest.approx(6.0, abs=1e-9)
    assert err < 1e-8


def test_gradcheck_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0])
    err = grad_check(lambda: ad.mean(c), [x])
    assert err == 0.0


def test_gradcheck_eps_validation():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: ad.mean(x), [x], eps=0.1)


@pytest.mark.parametrize("name,f,params", op_grad_setups(np.random.default_rng(777)),
                         ids=lambda v: v if isinstance(v, str) else "")
def test_every_op_passes_gradcheck(name, f, params):
    assert grad_check(f, params, eps=1e-5) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_l2_normalize_unit_norm_property(n, d, seed):
    rows = np.random.default_rng(seed).standard_normal((n, d))
    rows += np.sign(rows) * 0.01  # keep away from the zero-vector error
    out = ad.l2_normalize(Tensor(rows))
    norms = np.linalg.norm(out.data, axis=-1)
    assert np.all(np.abs(norms - 1.0) <= 1e-9)


def test_backward_accumulates_into_grad():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        ad.mean(ad.scale(x, 3.0)).backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        ad.scale(x, 2.0).backward()


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        ad.bmm(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 3, 2))))


def test_non_finite_result_raises():
    with pytest.raises(NumericError):
        ad.scale(Tensor([1e308]), 10.0)


def test_momentum_style_constants_get_no_graph():
    a = Tensor(np.ones((2, 2)), requires_grad=False)
    out = ad.matmul(a, np.eye(2))
    assert out._backward is None and not out.requires_grad


def test_concat_and_reshape_roundtrip(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((2, 2)))
    merged = ad.concat([a, b], axis=1)
    assert merged.shape == (2, 5)
    back = ad.reshape(merged, (5, 2))
    assert back.data.reshape(2, 5) == pytest.approx(merged.data)


def test_conv2d_matches_direct_convolution(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for f in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, f, i, j] = (xp[0, :, i : i + 3, j : j + 3] * w[f]).sum() + b[f]
    assert out == pytest.approx(expected, abs=1e-12)
