import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import avgpool_loops, conv2d_loops, matmul_loops, maxpool_loops
from pscnn.errors import DimensionError, EvaluationError, NonFiniteError, ParameterError
from pscnn.tensor import (
    Tensor,
    adaptive_avgpool2d,
    add,
    affine,
    avgpool2d,
    conv2d,
    grad_check,
    maxpool2d,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    tensor_sum,
)


# -- forward examples --------------------------------------------------------


def test_conv_pointwise_scaling():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel_with_padding(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(x, w, pad=1).data, x)


def test_conv_matches_loops_strided_padded(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, 2, 1), rtol=1e-10, atol=1e-12)


def test_maxpool_small():
    out = maxpool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), 2, 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_tie_routes_to_first_element():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    tensor_sum(maxpool2d(x, 2, 2)).backward()
    expect = np.zeros((4, 4))
    expect[0::2, 0::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expect)


def test_maxpool_matches_loops(rng):
    x = rng.standard_normal((1, 1, 9, 9))
    out = maxpool2d(Tensor(x), 3, 3)
    ref, _ = maxpool_loops(x, 3, 3)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, ref)


def test_maxpool_overlapping_gradient_matches_argmax_oracle(rng):
    x = rng.standard_normal((1, 2, 7, 7))
    t = Tensor(x, requires_grad=True)
    g = rng.standard_normal((1, 2, 3, 3))
    maxpool2d(t, 3, 2).backward(g)
    _, arg = maxpool_loops(x, 3, 2)
    expect = np.zeros_like(x)
    for c in range(2):
        for r in range(3):
            for s in range(3):
                i, j = arg[0, c, r, s]
                expect[0, c, i, j] += g[0, c, r, s]
    np.testing.assert_allclose(t.grad, expect, rtol=1e-12)


def test_avgpool_matches_loops(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    np.testing.assert_allclose(avgpool2d(Tensor(x), 3, 2).data, avgpool_loops(x, 3, 2), rtol=1e-12)


def test_adaptive_pool_divisible_is_plain_average(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    np.testing.assert_allclose(adaptive_avgpool2d(Tensor(x), 3).data, avgpool_loops(x, 2, 2), rtol=1e-12)


def test_adaptive_pool_bins_overlap_when_not_divisible():
    x = np.arange(7, dtype=np.float64).reshape(1, 1, 1, 7).repeat(7, axis=2)
    out = adaptive_avgpool2d(Tensor(x), 3).data[0, 0, 0]
    # bins [0,3), [2,5), [4,7)
    np.testing.assert_allclose(out, [1.0, 3.0, 5.0])


def test_adaptive_pool_can_enlarge():
    x = np.arange(5, dtype=np.float64).reshape(1, 1, 1, 5).repeat(5, axis=2)
    out = adaptive_avgpool2d(Tensor(x), 6).data[0, 0, 0]
    # bins [0,1), [0,2), [1,3), [2,4), [3,5), [4,5)
    np.testing.assert_allclose(out, [0.0, 0.5, 1.5, 2.5, 3.5, 4.0])


def test_relu_and_identity_affine():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(affine(x, np.eye(3, dtype=np.float32), np.zeros(3, np.float32)).data, x)


def test_affine_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(affine(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=1e-12)


def test_float32_is_default_and_float64_preserved():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))))
    assert out.dtype == np.float64


def test_softmax_cross_entropy_uniform():
    loss = softmax_cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(5))


# -- gradients -----------------------------------------------------------------


def _dot(t, g):
    """⟨t, g⟩ as a differentiable scalar."""
    return tensor_sum(_mul_const(t, g))


def _mul_const(t, g):
    from pscnn.tensor import _result

    g = np.asarray(g, dtype=t.dtype)
    return _result(t.data * g, (t,), lambda up: [(t, up * g)], "mul_const")


def test_grad_check_sum_is_exact(rng):
    assert grad_check(lambda t: tensor_sum(t), rng.standard_normal((3, 4))) < 1e-12


def test_grad_check_relu_conv_example(rng):
    w = Tensor(rng.standard_normal((2, 1, 3, 3)))
    err = grad_check(lambda t: tensor_sum(relu(conv2d(t, w))), rng.standard_normal((1, 1, 5, 5)), eps=1e-3)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_conv_weight_and_bias_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)))
    w0, b0 = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    g = rng.standard_normal((2, 3, 3, 3))

    def loss_w(w):
        return _dot(conv2d(x, w, Tensor(b0), 2, 1), g)

    def loss_b(b):
        return _dot(conv2d(x, Tensor(w0), b, 2, 1), g)

    assert grad_check(loss_w, w0, eps=1e-5) < 1e-6
    assert grad_check(loss_b, b0, eps=1e-5) < 1e-6


def test_grad_accumulates_over_reuse(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    tensor_sum(add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, np.full(4, 2.0))


def test_scale_and_reshape_gradients(rng):
    x0 = rng.standard_normal((2, 6))
    g = rng.standard_normal((3, 4))
    assert grad_check(lambda t: _dot(reshape(scale(t, -2.5), (3, 4)), g), x0, eps=1e-5) < 1e-8


def test_softmax_cross_entropy_gradient(rng):
    labels = rng.integers(0, 4, size=5)
    assert grad_check(lambda t: softmax_cross_entropy(t, labels), rng.standard_normal((5, 4)), eps=1e-5) < 1e-7


# -- adjoint identity: ⟨L x, y⟩ = ⟨x, Lᵀ y⟩ for linear ops ----------------------


def _adjoint_gap(op, x, rng):
    t = Tensor(x, requires_grad=True)
    out = op(t)
    y = rng.standard_normal(out.shape)
    out.backward(y)
    lhs = float(np.sum(out.data * y))
    rhs = float(np.sum(x * t.grad))
    return abs(lhs - rhs) / max(1.0, abs(lhs))


@pytest.mark.parametrize(
    "name,op,shape",
    [
        ("conv_x", lambda t, w=np.random.default_rng(1).standard_normal((3, 2, 3, 3)): conv2d(t, w, stride=2, pad=1), (2, 2, 7, 7)),
        ("avgpool", lambda t: avgpool2d(t, 3, 2), (1, 3, 9, 9)),
        ("adaptive", lambda t: adaptive_avgpool2d(t, 4), (2, 2, 7, 7)),
        ("reshape", lambda t: reshape(t, (6, -1)), (2, 3, 4)),
        ("scale", lambda t: scale(t, 0.3), (5,)),
    ],
)
def test_adjoint_identity(name, op, shape):
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(10):
        assert _adjoint_gap(op, rng.standard_normal(shape), rng) < 1e-10


def test_conv_adjoint_in_weight(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    op = lambda w: conv2d(Tensor(x), w, stride=1, pad=1)  # noqa: E731
    assert _adjoint_gap(op, rng.standard_normal((4, 3, 3, 3)), rng) < 1e-10


# -- shapes (property) -----------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    h=st.integers(3, 10),
    k=st.integers(1, 3),
    stride=st.integers(1, 3),
    pad=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_shape_and_values_property(n, c, h, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, h))
    w = rng.standard_normal((2, c, k, k))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
    side = (h + 2 * pad - k) // stride + 1
    assert out.shape == (n, 2, side, side)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, None, stride, pad), rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 9), k=st.integers(1, 3), stride=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_maxpool_property(h, k, stride, seed):
    if k > h:
        return
    x = np.random.default_rng(seed).standard_normal((1, 2, h, h))
    ref, _ = maxpool_loops(x, k, stride)
    np.testing.assert_array_equal(maxpool2d(Tensor(x), k, stride).data, ref)


# -- error cases -------------------------------------------------------------


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_invalid_stride_and_pool_window():
    with pytest.raises(ParameterError):
        conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 1, 1)), stride=0)
    with pytest.raises(DimensionError):
        maxpool2d(np.zeros((1, 1, 2, 2)), 3)


def test_affine_inner_dimension():
    with pytest.raises(DimensionError):
        affine(np.zeros((2, 3)), np.zeros((4, 2)))


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        scale(Tensor(np.array([1e308])), 10.0)


def test_grad_check_rejects_bad_eps_and_nonfinite():
    with pytest.raises(ParameterError):
        grad_check(tensor_sum, np.ones(2), eps=1.0)
    with pytest.raises(EvaluationError):
        grad_check(lambda t: relu(scale(t, np.inf)), np.ones(2))


def test_backward_needs_scalar_or_seed():
    with pytest.raises(DimensionError):
        relu(Tensor(np.ones(3), requires_grad=True)).backward()
