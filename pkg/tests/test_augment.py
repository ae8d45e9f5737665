import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knnmoco.augment import (
    AugOp,
    apply_mixed,
    apply_op,
    apply_policy,
    policy_from_string,
    policy_to_string,
    standard_policy,
    strong_policy,
)
from knnmoco.errors import ConfigError


@pytest.fixture
def img(rng):
    return rng.uniform(size=(24, 24, 3))


def test_zero_probability_policy_is_identity(img, rng):
    policy = tuple(AugOp(op.kind, 0.0, op.magnitude) for op in standard_policy())
    out = apply_policy(img, policy, rng)
    assert np.array_equal(out, img)


def test_flip_is_an_involution(img, rng):
    policy = (AugOp("horizontal-flip", 1.0),)
    once = apply_policy(img, policy, rng)
    twice = apply_policy(once, policy, rng)
    assert np.array_equal(twice, img)
    assert not np.array_equal(once, img)


def test_grayscale_luma_weights(rng):
    img = np.zeros((2, 2, 3))
    img[..., 0] = 1.0  # pure red
    out = apply_op(img, AugOp("grayscale", 1.0), rng)
    assert out == pytest.approx(np.full((2, 2, 3), 0.299))


def test_blur_preserves_constant_interior():
    img = np.full((16, 16, 3), 0.642)
    out = apply_op(img, AugOp("gaussian-blur", 1.0, 2.0), np.random.default_rng(3))
    assert np.abs(out[4:12, 4:12] - 0.642).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_value_range_preserved_by_any_pipeline(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(12, 12, 3))
    for policy in (standard_policy(), strong_policy()):
        out = apply_policy(img, policy, rng)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == img.shape


def test_determinism_under_fixed_seed(img):
    a = apply_policy(img, standard_policy(), np.random.default_rng(17))
    b = apply_policy(img, standard_policy(), np.random.default_rng(17))
    assert np.array_equal(a, b)


def test_mixed_degenerate_p_zero_matches_standard(img):
    out = apply_mixed(img, standard_policy(), strong_policy(), 0.0,
                      np.random.default_rng(7))
    ref_rng = np.random.default_rng(7)
    ref_rng.uniform()  # the branch draw
    assert np.array_equal(out, apply_policy(img, standard_policy(), ref_rng))


def test_mixed_degenerate_p_one_matches_strong(img):
    out = apply_mixed(img, standard_policy(), strong_policy(), 1.0,
                      np.random.default_rng(7))
    ref_rng = np.random.default_rng(7)
    ref_rng.uniform()
    assert np.array_equal(out, apply_policy(img, strong_policy(), ref_rng))


def test_mixed_branch_rate_is_binomial(img):
    # sentinel policies make the fired branch observable
    identity = ()
    to_gray = (AugOp("grayscale", 1.0),)
    rng = np.random.default_rng(23)
    strong_fired = 0
    for _ in range(10_000):
        out = apply_mixed(img, identity, to_gray, 0.5, rng)
        strong_fired += not np.array_equal(out, img)
    assert abs(strong_fired - 5000) <= 150  # 3 sigma


def test_solarize_and_posterize_semantics(rng):
    img = np.array([[[0.1, 0.6, 0.9]]])
    sol = apply_op(img, AugOp("solarize", 1.0, 0.5), rng)
    assert sol == pytest.approx(np.array([[[0.1, 0.4, 0.1]]]), abs=1e-12)
    post = apply_op(img, AugOp("posterize", 1.0, 2.0), rng)
    assert np.all(np.isin(np.round(post * 4), np.arange(5)))


def test_policy_string_roundtrip():
    policy = standard_policy()
    assert policy_from_string(policy_to_string(policy)) == policy


def test_invalid_ops_rejected():
    with pytest.raises(ConfigError):
        AugOp("vortex", 0.5)
    with pytest.raises(ConfigError):
        AugOp("brightness", 1.5, 0.4)
    with pytest.raises(ConfigError):
        AugOp("hue-rotate", 0.5, 0.9)
    with pytest.raises(ConfigError):
        policy_from_string("flip:0.5:1:2")


def test_strong_policy_distorts_color_less_than_standard():
    # the mixing experiment's mechanism: the strong policy applies fewer /
    # weaker color distortions than the standard one
    def color_pressure(policy):
        return sum(op.prob * op.magnitude for op in policy
                   if op.kind in ("brightness", "contrast", "saturation", "hue-rotate"))

    assert color_pressure(strong_policy()) < color_pressure(standard_policy())
