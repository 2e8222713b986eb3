import numpy as np
import pytest

from taxocodec.errors import GradientCheckError, ShapeMismatchError
from taxocodec.layers import Conv2d, Linear
from taxocodec.numerics import (Parameter, Tensor, bilinear_resize, concat, conv2d, einsum,
                                global_mean_pool, grad_check, l1_loss, linear, no_grad, relu,
                                softmax_cross_entropy, softplus, split)


def _param(rng, *shape):
    return Parameter(rng.standard_normal(shape))


class TestTensor:

    def test_integer_input_becomes_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_is_kept(self):
        assert Tensor(np.zeros(3)).dtype == np.float64

    def test_reused_input_accumulates(self):
        x = Parameter(np.array([1.5, -2.0]))
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, -4.0])

    def test_broadcast_add_gradient(self):
        x = Parameter(np.ones((2, 3)))
        b = Parameter(np.ones((3,)))
        (x + b).sum().backward()
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_scalar_operators(self):
        x = Parameter(np.array([2.0]))
        y = (1.0 - x) / 4.0 + 3.0 * x
        y.backward()
        np.testing.assert_allclose(y.data, [2.0 * 3.0 - 0.25])
        np.testing.assert_allclose(x.grad, [2.75])

    def test_no_grad_records_nothing(self):
        x = Parameter(np.ones(3))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.creator is None

    def test_intermediate_grads_are_released(self):
        x = Parameter(np.ones(3))
        h = x * 2.0
        h.sum().backward()
        assert h.grad is None
        assert x.grad is not None

    def test_backward_is_bit_identical_across_runs(self):
        rng = np.random.default_rng(0)
        w = _param(rng, 4, 3, 3, 3)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        grads = []
        for _ in range(2):
            w.grad = None
            relu(conv2d(x, w, padding=1)).mean().backward()
            grads.append(w.grad.copy())
        assert np.array_equal(grads[0], grads[1])


class TestShapeChecks:

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))

    def test_conv_kernel_larger_than_input(self):
        with pytest.raises(ShapeMismatchError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_linear_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            linear(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 4))))

    def test_resize_to_zero(self):
        with pytest.raises(ShapeMismatchError):
            bilinear_resize(Tensor(np.zeros((1, 1, 4, 4))), 0, 4)

    def test_resize_same_size_is_identity(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        assert bilinear_resize(x, 4, 4) is x

    def test_pool_rejects_empty_extent(self):
        with pytest.raises(ShapeMismatchError):
            global_mean_pool(Tensor(np.zeros((1, 2, 0, 3))))

    def test_split_must_cover_axis(self):
        with pytest.raises(ShapeMismatchError):
            split(Tensor(np.zeros((1, 5, 2, 2))), [2, 2])

    def test_einsum_rejects_single_operand_reduction(self):
        with pytest.raises(ShapeMismatchError):
            einsum("ab,bc->c", Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))

    def test_cross_entropy_label_shape(self):
        with pytest.raises(ShapeMismatchError):
            softmax_cross_entropy(Tensor(np.zeros((2, 4))), np.zeros(3, dtype=int))

    def test_l1_target_shape(self):
        with pytest.raises(ShapeMismatchError):
            l1_loss(Tensor(np.zeros((2, 4))), np.zeros((2, 3)))


class TestForwardValues:

    def test_conv_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w)).data
        expected = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_conv_is_linear_in_its_input(self):
        rng = np.random.default_rng(7)
        x, y = rng.standard_normal((2, 1, 3, 6, 6))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))

        def conv(a):
            return conv2d(Tensor(a), w, stride=2, padding=1).data

        np.testing.assert_allclose(conv(2.0 * x - 3.0 * y), 2.0 * conv(x) - 3.0 * conv(y), rtol=1e-10, atol=1e-12)

    def test_strided_conv_output_shape(self):
        x = Tensor(np.zeros((2, 3, 16, 16)))
        assert conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1).shape == (2, 4, 8, 8)

    def test_resize_of_constant_is_constant(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.0))
        np.testing.assert_allclose(bilinear_resize(x, 7, 9).data, 3.0)

    def test_softplus_is_stable(self):
        out = softplus(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 1000.0])

    def test_uniform_logits_cross_entropy(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 2]))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_positive_parameter_value(self):
        p = Parameter(np.array([0.0]), positive=True)
        assert p.value.item() == pytest.approx(np.log(2.0) + 1e-6)


class TestGradCheck:

    def test_conv_stride_padding_bias(self):
        rng = np.random.default_rng(2)
        layer = Conv2d(2, 3, 3, rng, stride=2).astype(np.float64)
        layer.bias.data[:] = rng.standard_normal(3)
        x = Parameter(rng.standard_normal((2, 2, 7, 7)))
        report = grad_check(lambda: (layer(x) * layer(x)).mean(), [x] + layer.parameters())
        assert report.passed, report

    def test_linear_relu_softplus(self):
        rng = np.random.default_rng(3)
        layer = Linear(5, 4, rng).astype(np.float64)
        x = Parameter(rng.standard_normal((3, 5)))
        report = grad_check(lambda: softplus(relu(layer(x))).sum(), [x] + layer.parameters())
        assert report.passed, report

    def test_einsum_resize_pool(self):
        rng = np.random.default_rng(4)
        coeffs = _param(rng, 2, 3, 4)
        bases = _param(rng, 4, 3, 3)

        def f():
            maps = einsum("bnt,thw->bnhw", coeffs, bases)
            return (global_mean_pool(bilinear_resize(maps, 5, 4)) * 1.5).sum()

        assert grad_check(f, [coeffs, bases]).passed

    def test_concat_split_division(self):
        rng = np.random.default_rng(5)
        a, b = _param(rng, 1, 2, 3, 3), _param(rng, 1, 3, 3, 3)
        scale = Parameter(rng.uniform(1.0, 2.0, size=(1, 5, 1, 1)))

        def f():
            joined = concat([a, b], axis=1) / scale
            left, right = split(joined, [1, 4])
            return (left * left).sum() + right.mean()

        assert grad_check(f, [a, b, scale]).passed

    def test_losses(self):
        rng = np.random.default_rng(6)
        logits = _param(rng, 2, 3, 4, 4)
        labels = rng.integers(0, 3, size=(2, 4, 4))
        pred = _param(rng, 2, 1, 4, 4)
        target = rng.standard_normal((2, 1, 4, 4))
        assert grad_check(lambda: softmax_cross_entropy(logits, labels), [logits]).passed
        assert grad_check(lambda: l1_loss(pred, target), [pred]).passed

    def test_positive_parameter(self):
        p = Parameter(np.array([-0.5, 0.3, 2.0]), positive=True)
        assert grad_check(lambda: (p.value * p.value).sum(), [p]).passed

    def test_wrong_gradient_is_reported(self):
        x = Parameter(np.array([1.0, 2.0]))

        def f():
            y = x * 1.0
            y.data = y.data * 2.0
            return y.sum()

        report = grad_check(f, [x])
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5)

    def test_non_finite_loss_raises(self):
        x = Parameter(np.array([0.0]))
        with pytest.raises(GradientCheckError) as info:
            grad_check(lambda: (1.0 / x).sum(), [x])
        assert info.value.parameter_index == -1
