import numpy as np
import pytest

from config import VERIFICATION_DTYPE
from services.errors import ConfigError, DegenerateBatchError, NonFiniteError, ShapeError
from services.layers import MultiHeadSelfAttention
from services.tensor_core import (
    BN_EPS,
    Graph,
    Tensor,
    activation,
    batchnorm,
    channel_scale,
    conv2d,
    conv_output_size,
    cross_entropy,
    gap,
    grad_check,
    linear,
    no_grad,
    softmax,
    stack,
)


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_gap_of_ones():
    out = gap(Tensor(np.ones((1, 2, 2, 2))))
    np.testing.assert_array_equal(out.data, [[1.0, 1.0]])


def test_gap_is_arithmetic_mean():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert gap(Tensor(x)).data[0, 0] == 2.5


def test_gap_rejects_empty_spatial_extent():
    with pytest.raises(ShapeError):
        gap(Tensor(np.ones((1, 2, 0, 3))))


def test_linear_identity_and_hand_example():
    x = Tensor(np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(linear(x, Tensor(np.eye(2))).data, x.data)
    w = Tensor(np.array([[1.0, 1.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(linear(x, w).data, [[3.0, 2.0]])


def test_linear_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    x, w, b = leaf(rng.standard_normal((4, 8))), leaf(rng.standard_normal((3, 8))), leaf(rng.standard_normal(3))
    weights = Tensor(rng.standard_normal((4, 3)))
    result = grad_check(lambda: (linear(x, w, b) * weights).sum(), [x, w, b])
    assert result.checked == 32 + 24 + 3
    assert result.max_relative_error < 1e-7


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_conv_1x1_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    kernel = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(kernel)).data, x)


def test_conv_ones_kernel_center_value():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_stride_two_floors_output_size():
    out = conv2d(Tensor(np.ones((1, 2, 7, 7))), Tensor(np.ones((4, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)


def test_conv_output_size_strict_rejects_fractional_extent():
    assert conv_output_size(8, 3, 2, 1) == 4
    with pytest.raises(ShapeError):
        conv_output_size(8, 3, 2, 1, strict=True)
    with pytest.raises(ShapeError):
        conv_output_size(2, 5, 1, 0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_batchnorm_train_standardized_input_is_nearly_unchanged():
    rng = np.random.default_rng(2)
    raw = rng.standard_normal((16, 3))
    x = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    out = batchnorm(
        Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True
    )
    # отличие только из-за eps в знаменателе
    np.testing.assert_allclose(out.data, x, rtol=BN_EPS, atol=0)


def test_batchnorm_zero_gamma_gives_beta():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 2, 3, 3)))
    out = batchnorm(x, Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)), np.zeros(2), np.ones(2), training=True)
    np.testing.assert_array_equal(out.data, np.full((4, 2, 3, 3), 5.0))


def test_batchnorm_batch_of_one_in_training():
    with pytest.raises(DegenerateBatchError):
        batchnorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)


def test_batchnorm_updates_running_statistics():
    x = np.array([[1.0], [3.0]])
    mean, var = np.zeros(1), np.ones(1)
    batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, training=True)
    np.testing.assert_allclose(mean, [0.2])
    # несмещенная дисперсия батча равна 2
    np.testing.assert_allclose(var, [0.9 + 0.1 * 2.0])


def test_batchnorm_eval_is_affine_in_running_stats():
    x = np.array([[2.0, -1.0]])
    out = batchnorm(
        Tensor(x), Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.5, 0.0])),
        np.array([1.0, -1.0]), np.array([4.0, 1.0]), training=False, eps=0.0
    )
    np.testing.assert_allclose(out.data, [[1.5, 0.0]])


def test_channel_scale_with_ones_is_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(channel_scale(Tensor(x), Tensor(np.ones((2, 3)))).data, x)
    tokens = rng.standard_normal((2, 5, 3))
    np.testing.assert_array_equal(channel_scale(Tensor(tokens), Tensor(np.ones((2, 3)))).data, tokens)


def test_channel_scale_shape_mismatch():
    with pytest.raises(ShapeError):
        channel_scale(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones((2, 4))))


def test_activation_unknown_kind():
    assert activation(Tensor(np.array([-1.0, 2.0])), "relu").data.tolist() == [0.0, 2.0]
    with pytest.raises(ConfigError):
        activation(Tensor(np.zeros(2)), "gelu")


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    out = softmax(Tensor(rng.standard_normal((3, 7)) * 50))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(3))


def test_cross_entropy_of_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
    assert loss.item() == pytest.approx(np.log(5.0))


def test_mhsa_single_token_returns_value_projection():
    rng = np.random.default_rng(6)
    attn = MultiHeadSelfAttention(8, 2, rng=rng)
    x = Tensor(rng.standard_normal((3, 1, 8)))
    out, weights = attn(x, return_weights=True)
    np.testing.assert_array_equal(weights.data, np.ones((3, 2, 1, 1)))
    expected = attn.o(attn.v(x))
    np.testing.assert_allclose(out.data, expected.data, rtol=1e-12, atol=1e-12)


def test_mhsa_equal_tokens_give_uniform_weights():
    rng = np.random.default_rng(7)
    attn = MultiHeadSelfAttention(8, 4, rng=rng)
    token = rng.standard_normal((1, 1, 8))
    _, weights = attn(Tensor(np.repeat(token, 5, axis=1)), return_weights=True)
    np.testing.assert_allclose(weights.data, np.full((1, 4, 5, 5), 0.2))


def test_mhsa_heads_must_divide_dim():
    with pytest.raises(ShapeError):
        MultiHeadSelfAttention(6, 4)


def test_stack_then_sum_of_one_branch_is_exact():
    rng = np.random.default_rng(8)
    s = Tensor(rng.standard_normal((4, 3)))
    np.testing.assert_array_equal(stack([s], axis=1).sum(axis=1).data, s.data)


def test_backward_accumulates_over_shared_nodes():
    x = leaf([2.0, -3.0])
    y = x * x + x
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0, -5.0])


def test_graph_order_puts_inputs_first():
    a = leaf([1.0])
    b = a * 2.0
    c = b + a
    nodes = Graph.from_output(c).nodes
    assert nodes.index(a) < nodes.index(b) < nodes.index(c)
    assert Graph.from_output(c).parameters() == [a]


def test_no_grad_skips_graph():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_nonfinite_result_raises():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([0.0])).log()


def test_item_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(2)).item()


def test_grad_check_of_plain_sum_is_exact():
    rng = np.random.default_rng(9)
    x = leaf(rng.standard_normal((3, 4)))
    assert grad_check(lambda: x.sum(), [x]).max_relative_error < 1e-10


def test_grad_check_skips_relu_kink_at_zero():
    x = leaf([0.0, 1.5, -2.0, 0.7])
    result = grad_check(lambda: x.relu().sum(), [x])
    assert result.skipped == 1
    assert result.checked == 3
    assert result.passed(1e-10)


def test_grad_check_rejects_vector_loss():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        grad_check(lambda: x * 2.0, [x])


def test_grad_check_samples_large_tensors():
    rng = np.random.default_rng(10)
    x = leaf(rng.uniform(0.5, 1.5, 500))
    result = grad_check(lambda: (x * x).sum(), [x], coords=16)
    assert result.checked == 16
    assert result.max_relative_error < 1e-7


def test_sigmoid_at_zero_and_its_derivative():
    x = leaf([0.0])
    y = x.sigmoid()
    y.sum().backward()
    assert y.data[0] == 0.5
    assert x.grad[0] == 0.25


def test_gap_gradient_is_uniform():
    x = leaf(np.random.default_rng(11).standard_normal((2, 3, 5, 5)))
    gap(x).sum().backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3, 5, 5), 1 / 25), rtol=1e-15)


def test_grad_check_tolerates_roundoff_on_tiny_gradients():
    rng = np.random.default_rng(12)
    x, y = leaf(rng.standard_normal(4)), leaf(rng.standard_normal(4))
    result = grad_check(lambda: (x * 1e3).sum() + (y * 1e-9).sum(), [x, y])
    assert result.checked == 8
    assert result.passed(1e-6)


def test_grad_check_still_flags_wrong_gradient():
    x = leaf([1.0, 2.0, 3.0])
    result = grad_check(lambda: (x * x.detach()).sum(), [x])
    assert abs(result.max_relative_error - 0.5) < 1e-6
    assert not result.passed(1e-6)


def test_integer_data_is_promoted_to_verification_precision():
    assert Tensor([1, 2, 3]).dtype == np.dtype(VERIFICATION_DTYPE)
