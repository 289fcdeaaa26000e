import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xtrans2cap import numerics as nx
from xtrans2cap.cmf import FusionConfig, FusionLayerParams, draw_indicator, fuse, fuse_variant
from xtrans2cap.numerics import DimensionError, Tensor, grad_check


def pair(rng, shape=(3, 5, 4)):
    return Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))


def test_indicator_zero_returns_student_exactly(rng):
    s, t = pair(rng)
    out = fuse(s, t, FusionConfig(), indicator=np.zeros(3))
    assert out.data.tobytes() == s.data.tobytes()


def test_indicator_one_adds(rng):
    s, t = pair(rng)
    out = fuse(s, t, FusionConfig(), indicator=np.ones(3))
    np.testing.assert_array_equal(out.data, s.data + t.data)


def test_indicator_is_per_sample(rng):
    s, t = pair(rng)
    out = fuse(s, t, FusionConfig(), indicator=np.array([1.0, 0.0, 1.0])).data
    np.testing.assert_array_equal(out[1], s.data[1])
    np.testing.assert_array_equal(out[[0, 2]], (s.data + t.data)[[0, 2]])


def test_mask_frequency_monte_carlo():
    ind = draw_indicator(np.random.default_rng(0), 0.2, 100_000)
    assert abs((ind == 0).mean() - 0.2) <= 0.01


def test_expected_fusion_within_three_sigma(rng):
    p, n = 0.2, 20_000
    s, t = rng.normal(size=(1, 1, 4)), rng.normal(size=(1, 1, 4))
    r = np.random.default_rng(5)
    draws = np.stack([fuse(Tensor(s), Tensor(t), FusionConfig(p=p), rng=r).data[0, 0] for _ in range(n)])
    expected = s[0, 0] + (1 - p) * t[0, 0]
    sigma = np.abs(t[0, 0]) * np.sqrt(p * (1 - p) / n)
    assert (np.abs(draws.mean(axis=0) - expected) <= 3 * sigma + 1e-12).all()


def test_p_one_gives_student_only(rng):
    s, t = pair(rng)
    for seed in range(5):
        out = fuse(s, t, FusionConfig(p=1.0), rng=np.random.default_rng(seed))
        np.testing.assert_array_equal(out.data, s.data)


def test_unmasked_equals_masked_with_p_zero(rng):
    s, t = pair(rng)
    a = fuse_variant(s, t, "add_unmasked").data
    b = fuse(s, t, FusionConfig(p=0.0), rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)


def test_off_is_identity_on_teacher(rng):
    s, t = pair(rng)
    assert fuse_variant(s, t, "off") is t


def test_concat_zero_weights(rng):
    s, t = pair(rng)
    params = FusionLayerParams.init("concat", 4, rng, np.float64)
    params.w.data[...] = 0
    assert not fuse_variant(s, t, "concat", params=params).data.any()


def test_attention_variant_shape(rng):
    s, t = pair(rng, (2, 3, 4))
    params = FusionLayerParams.init("attention", 4, rng, np.float64)
    out = fuse_variant(s, t, "attention", params=params, heads=2)
    assert out.shape == (2, 3, 4)
    single = fuse_variant(Tensor(s.data[0]), Tensor(t.data[0]), "attention", params=params, heads=2)
    np.testing.assert_allclose(single.data, out.data[0], atol=1e-12)


def test_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        fuse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), FusionConfig(), indicator=[1])


def test_masked_without_rng_or_indicator(rng):
    s, t = pair(rng)
    with pytest.raises(ValueError):
        fuse(s, t, FusionConfig())


def test_unknown_mode():
    with pytest.raises(ValueError):
        FusionConfig(mode="multiply")
    with pytest.raises(ValueError):
        FusionConfig(p=1.5)


def test_stop_gradient_switch(rng):
    s = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
    t = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
    out = fuse(s, t, FusionConfig(grad_to_student=False), indicator=[1.0])
    nx.sum(out).backward()
    assert s.grad is None or not s.grad.any()
    np.testing.assert_array_equal(t.grad, np.ones((1, 2, 3)))


@pytest.mark.parametrize("mode", ["add_masked", "add_unmasked", "concat", "attention"])
def test_fusion_grad(mode, rng):
    params = FusionLayerParams.init(mode, 4, rng, np.float64)
    s, t = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    op = lambda a, b: fuse_variant(a, b, mode, params=params, heads=2, indicator=[1.0, 0.0])  # noqa: E731
    report = grad_check(op, [s, t])
    assert report.passed, report


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_fused_value_is_student_plus_kept_teacher(seed, p):
    r = np.random.default_rng(seed)
    s, t = pair(r, (4, 2, 3))
    out = fuse(s, t, FusionConfig(p=p), rng=np.random.default_rng(seed)).data
    keep = draw_indicator(np.random.default_rng(seed), p, 4)
    np.testing.assert_array_equal(out, s.data + t.data * keep[:, None, None])
