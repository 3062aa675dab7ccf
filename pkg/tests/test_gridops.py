"""Grid primitive tests: hand-computed examples, oracle equivalence, invariants."""

import numpy as np
import pytest

from dsm3d.gridops import (
    Conv2dKernel,
    Shape2D,
    bilinear_resize,
    concat_channels,
    conv2d,
    flatten,
    layernorm,
    matmul,
    max_pool2,
    relu,
    softmax_rows,
    unflatten,
)

from oracles import naive_bilinear_resize, naive_conv2d, naive_matmul, naive_softmax_rows


class TestFlatten:
    def test_single_pixel_identity(self):
        g = np.array([[[1.0, 2.0, 3.0]]])
        assert np.array_equal(flatten(g), [[1.0, 2.0, 3.0]])

    def test_row_major_order(self):
        g = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        assert np.array_equal(flatten(g).ravel(), [1, 2, 3, 4])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(5, 7, 3))
        assert np.array_equal(unflatten(flatten(g), 5, 7), g)

    def test_rank_mismatch(self):
        with pytest.raises(ValueError):
            flatten(np.zeros((3, 3)))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_value(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0

    def test_zero_annihilates(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(3, 4))
        assert np.array_equal(matmul(np.zeros((2, 3)), b), np.zeros((2, 4)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
            lhs = matmul(matmul(a, b), c)
            rhs = matmul(a, matmul(b, c))
            assert np.abs(lhs - rhs).max() < 1e-9

    def test_matches_naive(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(5, 2))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() < 1e-12


class TestSoftmaxRows:
    def test_symmetric_row(self):
        assert np.allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_shift_invariance_large(self):
        out = softmax_rows(np.array([[1000.0, 1000.0]]))
        assert np.allclose(out, [[0.5, 0.5]])

    def test_closed_form(self):
        out = softmax_rows(np.array([[0.0, np.log(3.0)]]))
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.normal(scale=10.0, size=(6, 8))
            sums = softmax_rows(a).sum(axis=1)
            assert np.abs(sums - 1.0).max() < 1e-6

    def test_matches_naive(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(4, 6))
        assert np.abs(softmax_rows(a) - naive_softmax_rows(a)).max() < 1e-12


class TestLayernorm:
    def test_constant_row_maps_to_zero(self):
        out = layernorm(np.full((2, 4), 3.0), np.ones(4), np.zeros(4))
        assert np.array_equal(out, np.zeros((2, 4)))

    def test_two_point_row(self):
        out = layernorm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-6)

    def test_beta_shift(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 5))
        beta = rng.normal(size=5)
        base = layernorm(a, np.ones(5), np.zeros(5))
        shifted = layernorm(a, np.ones(5), beta)
        assert np.allclose(shifted, base + beta, atol=1e-12)

    def test_normalization_statistics(self):
        rng = np.random.default_rng(7)
        a = rng.normal(scale=5.0, size=(10, 32))
        out = layernorm(a, np.ones(32), np.zeros(32), eps=1e-12)
        assert np.abs(out.mean(axis=1)).max() < 1e-5
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-5


class TestRelu:
    def test_definition(self):
        assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_fixpoint_on_nonnegative(self):
        a = np.array([0.0, 1.0, 5.0])
        assert np.array_equal(relu(a), a)

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(4, 4))
        assert np.array_equal(relu(relu(a)), relu(a))


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(9)
        g = rng.normal(size=(5, 6, 3))
        k = Conv2dKernel(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3))
        assert np.array_equal(conv2d(g, k), g)

    def test_zero_weights_give_bias(self):
        g = np.ones((4, 4, 2))
        k = Conv2dKernel(np.zeros((3, 3, 2, 1)), np.array([2.5]))
        assert np.array_equal(conv2d(g, k), np.full((4, 4, 1), 2.5))

    def test_box_kernel_on_constant(self):
        g = np.full((3, 3, 1), 5.0)
        k = Conv2dKernel(np.full((3, 3, 1, 1), 1.0 / 9.0), np.zeros(1))
        out = conv2d(g, k)[:, :, 0]
        assert abs(out[1, 1] - 5.0) < 1e-12
        # zero padding pulls the border below the plateau value
        assert (out[0, :] < 5.0).all() and (out[:, 0] < 5.0).all()

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            Conv2dKernel(np.zeros((2, 2, 1, 1)), np.zeros(1))

    def test_matches_naive(self):
        rng = np.random.default_rng(10)
        g = rng.normal(size=(5, 4, 2))
        k = Conv2dKernel(rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3))
        assert np.abs(conv2d(g, k) - naive_conv2d(g, k.weights, k.bias)).max() < 1e-12


class TestBilinearResize:
    def test_same_shape_identity(self):
        rng = np.random.default_rng(11)
        g = rng.normal(size=(4, 5, 2))
        assert np.allclose(bilinear_resize(g, Shape2D(4, 5, 2)), g, atol=1e-12)

    def test_linear_interpolation(self):
        g = np.array([[[0.0], [2.0]]])
        out = bilinear_resize(g, Shape2D(1, 3, 1))
        assert np.allclose(out.ravel(), [0.0, 1.0, 2.0], atol=1e-12)

    def test_constant_stays_constant(self):
        g = np.full((3, 3, 1), 7.0)
        out = bilinear_resize(g, Shape2D(8, 5, 1))
        assert np.allclose(out, 7.0, atol=1e-12)

    def test_exact_on_affine_ramps(self):
        h_in, w_in = 4, 6
        ys, xs = np.meshgrid(np.arange(h_in), np.arange(w_in), indexing="ij")
        g = (1.5 * xs - 2.25 * ys + 0.5)[:, :, None].astype(np.float64)
        h_out, w_out = 9, 11
        out = bilinear_resize(g, Shape2D(h_out, w_out, 1))[:, :, 0]
        sy = np.arange(h_out) * (h_in - 1) / (h_out - 1)
        sx = np.arange(w_out) * (w_in - 1) / (w_out - 1)
        expect = 1.5 * sx[None, :] - 2.25 * sy[:, None] + 0.5
        assert np.abs(out - expect).max() < 1e-9

    def test_matches_naive(self):
        rng = np.random.default_rng(12)
        g = rng.normal(size=(3, 4, 2))
        out = bilinear_resize(g, Shape2D(7, 5, 2))
        assert np.abs(out - naive_bilinear_resize(g, 7, 5)).max() < 1e-12


class TestConcatChannels:
    def test_channel_placement(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=(2, 2, 1))
        b = rng.normal(size=(2, 2, 2))
        out = concat_channels(a, b)
        assert out.shape == (2, 2, 3)
        assert np.array_equal(out[:, :, :1], a)
        assert np.array_equal(out[:, :, 1:], b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            concat_channels(np.zeros((2, 2, 1)), np.zeros((3, 2, 1)))


class TestMaxPool2:
    def test_blocks(self):
        g = np.arange(16, dtype=float).reshape(4, 4, 1)
        out = max_pool2(g)
        assert np.array_equal(out[:, :, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            max_pool2(np.zeros((3, 4, 1)))
