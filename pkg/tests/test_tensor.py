import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exdrop.exceptions import DimensionError
from exdrop.tensor import Rng, conv2d, matmul, maxpool2d, relu

from oracles import conv_ref, pool_ref


def test_matmul_identity():
    out = matmul([[1, 0], [0, 1]], [[5], [7]])
    np.testing.assert_array_equal(out, [[5], [7]])
    assert out.dtype == np.float32


def test_matmul_dot():
    assert matmul([[1, 2]], [[3], [4]])[0, 0] == 11


def test_matmul_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 1\)"):
        matmul(np.ones((2, 3)), np.ones((4, 1)))


def test_matmul_associativity():
    g = np.random.default_rng(0)
    a, b, c = (g.uniform(-1, 1, (8, 8)).astype(np.float32) for _ in range(3))
    diff = np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c))).max()
    assert diff <= 1e-4


def test_conv_scaling():
    out = conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1), 1, 0)
    np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.0))


def test_conv_hand_sum():
    out = conv2d(np.array([[[1, 2], [3, 4]]]), np.ones((1, 1, 2, 2)), np.zeros(1), 1, 0)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 10


def test_conv_zero_kernel_bias():
    out = conv2d(np.random.default_rng(1).random((2, 4, 4)), np.zeros((3, 2, 3, 3)),
                 np.full(3, 5.0), 1, 1)
    np.testing.assert_array_equal(out, 5.0)


def test_conv_non_integral_output():
    with pytest.raises(DimensionError):
        conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1), 2, 0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1), (3, 1)])
def test_conv_matches_reference(stride, pad):
    g = np.random.default_rng(stride * 10 + pad)
    x = g.standard_normal((3, 7, 7)).astype(np.float32)
    w = g.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = g.standard_normal(4).astype(np.float32)
    if (7 + 2 * pad - 3) % stride:
        pytest.skip("non-integral geometry")
    np.testing.assert_allclose(conv2d(x, w, b, stride, pad), conv_ref(x, w, b, stride, pad),
                               rtol=1e-5, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 999))
def test_conv_identity_kernel(c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((c, h, w)).astype(np.float32)
    k = np.zeros((c, c, 1, 1), np.float32)
    k[np.arange(c), np.arange(c)] = 1.0
    np.testing.assert_array_equal(conv2d(x, k, np.zeros(c), 1, 0), x)


def test_conv_batch_equals_per_sample():
    g = np.random.default_rng(3)
    x = g.standard_normal((4, 2, 6, 6)).astype(np.float32)
    w = g.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = np.zeros(3, np.float32)
    batched = conv2d(x, w, b, 1, 1)
    for i in range(4):
        np.testing.assert_array_equal(batched[i], conv2d(x[i], w, b, 1, 1))


def test_maxpool_basic():
    out, idx = maxpool2d(np.array([[[1, 2], [3, 4]]], np.float32), 2, 2)
    assert out[0, 0, 0] == 4
    assert idx[0, 0, 0] == 3


def test_maxpool_ties_go_to_lowest_index():
    out, idx = maxpool2d(np.ones((1, 4, 4), np.float32), 2, 2)
    np.testing.assert_array_equal(idx[0], [[0, 2], [8, 10]])


def test_maxpool_first_value():
    out, idx = maxpool2d(np.array([[[5, 1], [1, 1]]], np.float32), 2, 2)
    assert out[0, 0, 0] == 5 and idx[0, 0, 0] == 0


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        maxpool2d(np.ones((1, 2, 2)), 3, 1)


def test_maxpool_matches_reference_overlapping():
    x = np.random.default_rng(5).standard_normal((2, 7, 7)).astype(np.float32)
    out, _ = maxpool2d(x, 3, 2)
    np.testing.assert_array_equal(out, pool_ref(x, 3, 2))


def test_relu():
    np.testing.assert_array_equal(relu([-1, 0, 2]), [0, 0, 2])
    np.testing.assert_array_equal(relu(-np.ones(5)), np.zeros(5))
    x = np.abs(np.random.default_rng(0).standard_normal(10)).astype(np.float32)
    np.testing.assert_array_equal(relu(x), x)


def test_kernels_deterministic():
    g = np.random.default_rng(9)
    x = g.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = g.standard_normal((4, 3, 5, 5)).astype(np.float32)
    b = g.standard_normal(4).astype(np.float32)
    assert conv2d(x, w, b, 1, 2).tobytes() == conv2d(x, w, b, 1, 2).tobytes()


def test_rng_reproducible():
    a, b = Rng(1234), Rng(1234)
    np.testing.assert_array_equal(a.uniform(10_000), b.uniform(10_000))
    np.testing.assert_array_equal(a.normal(100), b.normal(100))
    np.testing.assert_array_equal(a.bernoulli(np.full(50, 0.3)), b.bernoulli(np.full(50, 0.3)))


def test_rng_known_stream():
    # PCG64 stream is fixed across platforms; freeze the first draws for seed 0.
    first = Rng(0).uniform(3)
    assert first.tolist() == [0.6369616873214543, 0.2697867137638703, 0.04097352393619469]


def test_rng_spawn_independent_and_stable():
    r = Rng(7)
    a1, a2 = r.spawn(1).uniform(5), r.spawn(2).uniform(5)
    assert not np.array_equal(a1, a2)
    np.testing.assert_array_equal(a1, Rng(7).spawn(1).uniform(5))
