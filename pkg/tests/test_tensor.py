import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsanet import tensor as T
from wsanet.errors import ShapeError
from wsanet.rng import SplitMix64

from oracles import (attention_loops, avg_pool_loops, conv2d_loops, group_norm_two_pass,
                     splitmix64_reference)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# -- rng ----------------------------------------------------------------------

def test_splitmix64_matches_reference_stream():
    for seed in (0, 1, 42, 2 ** 64 - 1):
        g = SplitMix64(seed)
        assert [g.next_u64() for _ in range(16)] == splitmix64_reference(seed, 16)


def test_splitmix64_seed_zero_known_value():
    assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF


def test_uniform_array_bounds_and_determinism():
    a = SplitMix64(7).uniform_array(1000, -2.0, 3.0)
    b = SplitMix64(7).uniform_array(1000, -2.0, 3.0)
    assert np.array_equal(a, b)
    assert a.min() >= -2.0 and a.max() < 3.0


# -- convolution --------------------------------------------------------------

CONV_CASES = [
    # (n, cin, h, w, cout, k, stride, pad, groups)
    (1, 3, 5, 5, 4, (3, 3), (1, 1), (1, 1), 1),
    (2, 4, 6, 7, 6, (3, 3), (2, 2), (1, 1), 2),
    (1, 4, 8, 8, 4, (4, 4), (4, 4), (0, 0), 1),
    (1, 3, 5, 9, 3, (1, 5), (1, 1), (0, 2), 3),
    (2, 2, 9, 4, 2, (5, 1), (1, 1), (2, 0), 2),
    (1, 6, 4, 4, 6, (1, 1), (1, 1), (0, 0), 1),
    (1, 2, 7, 6, 4, (2, 3), (2, 1), (1, 0), 1),
]


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_matches_loop_oracle(case):
    n, cin, h, w, cout, k, s, p, g = case
    spec = T.ConvSpec(cin, cout, k, s, p, g, weight=rand((cout, cin // g, *k), 1), bias=rand(cout, 2))
    x = rand((n, cin, h, w), 3)
    y = T.conv2d(x, spec)
    ref = conv2d_loops(x, spec.weight, spec.bias, s, p, g)
    assert y.shape == ref.shape == spec.output_shape(x.shape)
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_vjp_is_the_adjoint(case):
    n, cin, h, w, cout, k, s, p, g = case
    wgt, b = rand((cout, cin // g, *k), 1), rand(cout, 2)
    spec = T.ConvSpec(cin, cout, k, s, p, g, weight=wgt, bias=b)
    x = rand((n, cin, h, w), 3)
    gy = rand(spec.output_shape(x.shape), 4)
    gx, gw, gb = T.conv2d_vjp(x, spec, gy)
    # linear in x (bias removed) and in w: <A x, gy> = <x, A^T gy>
    nob = T.ConvSpec(cin, cout, k, s, p, g, weight=wgt)
    assert np.isclose(np.sum(T.conv2d(x, nob) * gy), np.sum(x * gx), rtol=1e-12)
    assert np.isclose(np.sum(T.conv2d(x, nob) * gy), np.sum(wgt * gw), rtol=1e-12)
    np.testing.assert_allclose(gb, gy.sum(axis=(0, 2, 3)))


def test_conv_macs_formula():
    spec = T.ConvSpec(8, 16, 3, 2, 1, groups=4)
    # Cout * Cin/g * kh * kw * Ho * Wo * N
    assert spec.macs((2, 8, 10, 10)) == 16 * 2 * 9 * 5 * 5 * 2
    assert spec.param_count(bias=True) == 16 * 2 * 9 + 16


def test_conv_spec_rejects_bad_groups_and_shapes():
    with pytest.raises(ShapeError):
        T.ConvSpec(6, 4, 3, groups=4)
    with pytest.raises(ShapeError):
        T.ConvSpec(4, 4, 5).output_shape((1, 4, 3, 3))
    with pytest.raises(ShapeError):
        T.ConvSpec(4, 4, 3).output_shape((1, 3, 8, 8))
    with pytest.raises(ShapeError):
        T.as_tensor(np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 5), s=st.integers(1, 3),
       p=st.integers(0, 2))
def test_conv_output_shape_formula(h, w, k, s, p):
    spec = T.ConvSpec(2, 3, k, s, p, weight=np.ones((3, 2, k, k)))
    if h + 2 * p < k or w + 2 * p < k:
        with pytest.raises(ShapeError):
            spec.output_shape((1, 2, h, w))
        return
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    assert spec.output_shape((1, 2, h, w)) == (1, 3, ho, wo)
    assert T.conv2d(np.zeros((1, 2, h, w)), spec).shape == (1, 3, ho, wo)


# -- group norm ---------------------------------------------------------------

@pytest.mark.parametrize("shape,groups", [((1, 4, 3, 3), 2), ((2, 6, 4, 5), 3), ((1, 8, 2, 2), 4),
                                          ((3, 4, 1, 1), 1)])
def test_group_norm_matches_two_pass(shape, groups):
    x = rand(shape, 5) * 3 + 1
    gamma, beta = rand(shape[1], 6), rand(shape[1], 7)
    np.testing.assert_allclose(T.group_norm(x, groups, gamma, beta), group_norm_two_pass(x, groups, gamma, beta),
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
def test_group_norm_unit_affine_gives_zero_mean_unit_var(seed, groups):
    x = rand((2, 8, 4, 4), seed) * 5 - 2
    y = T.group_norm(x, groups, np.ones(8), np.zeros(8), eps=1e-12).reshape(2, groups, -1)
    np.testing.assert_allclose(y.mean(axis=2), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=2), 1, atol=1e-8)


def test_group_norm_is_per_sample():
    x = rand((2, 4, 3, 3), 8)
    y2 = T.group_norm(x, 2, np.ones(4), np.zeros(4))
    y1 = T.group_norm(x[:1], 2, np.ones(4), np.zeros(4))
    assert np.array_equal(y2[:1], y1)


def test_group_norm_rejects_indivisible_channels():
    with pytest.raises(ShapeError):
        T.group_norm(np.zeros((1, 6, 2, 2)), 4, np.ones(6), np.zeros(6))


# -- activations / softmax ----------------------------------------------------

def test_sigmoid_stays_strictly_inside_unit_interval():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    s = T.sigmoid(x)
    assert np.all(s > 0) and np.all(s < 1)
    assert s[2] == 0.5
    s32 = T.sigmoid(x.astype(np.float32))
    assert s32.dtype == np.float32 and np.all(s32 > 0) and np.all(s32 < 1)


def test_relu_and_unknown_activation():
    assert np.array_equal(T.activation(np.array([-1.0, 0.0, 2.0]), "relu"), [0.0, 0.0, 2.0])
    with pytest.raises(ValueError):
        T.activation(np.zeros(2), "gelu")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(xs, shift):
    x = np.array(xs)
    p = T.softmax(x)
    assert np.isclose(p.sum(), 1.0)
    assert np.all(p >= 0)
    np.testing.assert_allclose(T.softmax(x + shift), p, atol=1e-12)


def test_softmax_empty_raises():
    with pytest.raises(ValueError):
        T.softmax(np.array([]))


# -- pooling / upsample -------------------------------------------------------

@pytest.mark.parametrize("k,pad", [(3, 1), (7, 3), (1, 0)])
def test_avg_pool_matches_loops(k, pad):
    x = rand((2, 3, 6, 5), 9)
    np.testing.assert_allclose(T.avg_pool2d(x, k, 1, pad), avg_pool_loops(x, k, pad), rtol=1e-12, atol=1e-14)


def test_upsample_and_adjoint():
    x = rand((1, 2, 3, 2), 10)
    y = T.upsample_nearest2x(x)
    assert y.shape == (1, 2, 6, 4)
    assert np.array_equal(y[:, :, ::2, ::2], x) and np.array_equal(y[:, :, 1::2, 1::2], x)
    gy = rand(y.shape, 11)
    assert np.isclose(np.sum(y * gy), np.sum(x * T.upsample_nearest2x_vjp(gy)))


# -- top_k / concat / split ---------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=20), st.data())
def test_top_k_against_sorted_oracle(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    assert list(T.top_k(scores, k)) == sorted(ranked[:k])


def test_top_k_ties_prefer_lower_index_and_range_checked():
    assert list(T.top_k([1, 1, 1, 1], 2)) == [0, 1]
    with pytest.raises(ValueError):
        T.top_k([1, 2], 3)
    with pytest.raises(ValueError):
        T.top_k([1, 2], 0)


def test_concat_split_round_trip_and_errors():
    x = rand((2, 7, 3, 3), 12)
    parts = T.tensor_split(x, [2, 4, 1])
    assert [p.shape[1] for p in parts] == [2, 4, 1]
    assert np.array_equal(T.tensor_concat(parts), x)
    with pytest.raises(ShapeError):
        T.tensor_split(x, [3, 3])
    with pytest.raises(ShapeError):
        T.tensor_concat([x, rand((2, 1, 2, 3))])
    with pytest.raises(ShapeError):
        T.tensor_concat([])


# -- attention ----------------------------------------------------------------

@pytest.mark.parametrize("nq,nk,d", [(3, 5, 4), (1, 1, 2), (6, 2, 8)])
def test_attention_matches_loops(nq, nk, d):
    q, k, v = rand((nq, d), 13), rand((nk, d), 14), rand((nk, d), 15)
    np.testing.assert_allclose(T.scaled_dot_attention(q, k, v), attention_loops(q, k, v), rtol=1e-12, atol=1e-13)


def test_attention_rows_are_convex_combinations():
    v = rand((5, 3), 16)
    out = T.scaled_dot_attention(rand((4, 3), 17) * 10, rand((5, 3), 18), v)
    assert np.all(out <= v.max(axis=0) + 1e-12) and np.all(out >= v.min(axis=0) - 1e-12)


def test_attention_shape_errors_and_macs():
    with pytest.raises(ShapeError):
        T.scaled_dot_attention(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((4, 3)))
    assert T.attention_macs(10, 16, 4) == 2 * 10 * 16 * 4


def test_token_round_trip():
    x = rand((2, 3, 4, 5), 19)
    t = T.to_tokens(x)
    assert t.shape == (2, 20, 3)
    assert np.array_equal(t[1, 7], x[1, :, 1, 2])
    assert np.array_equal(T.from_tokens(t, 4, 5), x)


# -- worked examples ----------------------------------------------------------

def test_conv_all_ones_center_and_corner():
    spec = T.ConvSpec(1, 1, 3, 1, 1, weight=np.ones((1, 1, 3, 3)))
    y = T.conv2d(np.ones((1, 1, 3, 3)), spec)
    assert y[0, 0, 1, 1] == 9.0
    assert y[0, 0, 0, 0] == y[0, 0, 0, 2] == y[0, 0, 2, 0] == y[0, 0, 2, 2] == 4.0


def test_depthwise_delta_kernel_is_bitwise_identity():
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    x = rand((2, 3, 5, 4), 20)
    assert np.array_equal(T.conv2d(x, T.ConvSpec(3, 3, 3, 1, 1, groups=3, weight=w)), x)


def test_group_norm_constant_input_and_moments_at_default_eps():
    assert np.array_equal(T.group_norm(np.full((1, 4, 3, 3), 2.5), 2, np.ones(4), np.zeros(4)), np.zeros((1, 4, 3, 3)))
    # eps=1e-5 shrinks the variance by v/(v+eps); use groups with variance >> 10
    x = rand((2, 8, 6, 6), 21) * 10
    y = T.group_norm(x, 4, np.ones(8), np.zeros(8)).reshape(2, 4, -1)
    assert np.abs(y.mean(axis=2)).max() < 1e-10
    assert np.abs(y.var(axis=2) - 1).max() < 1e-6


def test_activation_examples():
    assert T.sigmoid(np.array(0.0)) == 0.5
    assert np.array_equal(T.activation(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])
    x = rand(100, 22) * 8
    np.testing.assert_allclose(T.sigmoid(x) + T.sigmoid(-x), 1.0, atol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(np.zeros(4)), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(T.softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], atol=1e-12)


def test_avg_pool_examples():
    assert T.avg_pool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)[0, 0, 0, 0] == 2.5
    c = np.full((1, 2, 5, 5), 3.0)
    np.testing.assert_allclose(T.avg_pool2d(c, 3, 1, 0), 3.0)
    assert T.avg_pool2d(rand((1, 1, 9, 6)), 7, 1, 3).shape == (1, 1, 9, 6)


def test_top_k_examples():
    assert list(T.top_k([0.1, 0.9, 0.9, 0.2], 2)) == [1, 2]
    assert list(T.top_k([5, 1, 3], 1)) == [0]
    assert list(T.top_k([3, 1, 2], 3)) == [0, 1, 2]


def test_concat_split_examples():
    a, b = rand((1, 2, 3, 3), 23), rand((1, 3, 3, 3), 24)
    c = T.tensor_concat([a, b])
    assert c.shape[1] == 5 and np.array_equal(c[:, :2], a) and np.array_equal(c[:, 2:], b)
    assert T.tensor_concat([a]) is a
    x = rand((1, 4, 2, 2), 25)
    one, rest = T.tensor_split(x, [1, 3])
    assert np.array_equal(one, x[:, :1]) and np.array_equal(rest, x[:, 1:])
    assert np.array_equal(T.tensor_split(x, [4])[0], x)


def test_attention_examples():
    v = rand((1, 4), 26)
    np.testing.assert_allclose(T.scaled_dot_attention(rand((3, 4), 27), rand((1, 4), 28), v), np.repeat(v, 3, 0))
    v = rand((5, 4), 29)
    np.testing.assert_allclose(T.scaled_dot_attention(np.zeros((2, 4)), rand((5, 4), 30), v),
                               np.repeat(v.mean(axis=0, keepdims=True), 2, 0), atol=1e-15)
