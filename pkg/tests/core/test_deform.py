"""Tests for bilinear sampling and deformable convolution."""

import numpy as np
import pytest

from src.core.deform import (OffsetShapeError, bilinear_sample, bilinear_sample_vjp, deform_conv2d,
                             deform_conv2d_vjp, offset_channels, uniform_offsets, zero_offsets)
from src.core.ops import conv2d, conv2d_vjp, conv_output_hw
from src.core.tensor import Conv2dKernel, Tensor


def naive_deform_conv2d(x, k, off):
    """Per-point sampling oracle."""
    h_out, w_out = conv_output_hw(x, k)
    out = np.zeros((x.n, k.c_out, h_out, w_out))
    w = k.weights.data
    for b in range(x.n):
        for o in range(k.c_out):
            for i in range(h_out):
                for j in range(w_out):
                    total = 0.0
                    for ci in range(k.c_in):
                        for ki in range(k.k_h):
                            for kj in range(k.k_w):
                                point = ki * k.k_w + kj
                                y = i * k.stride - k.padding + ki + off.data[b, 2 * point, i, j]
                                xc = j * k.stride - k.padding + kj + off.data[b, 2 * point + 1, i, j]
                                total += w[o, ci, ki, kj] * bilinear_sample(x, b, ci, y, xc)
                    if k.bias is not None:
                        total += k.bias[o]
                    out[b, o, i, j] = total
    return out


def test_sample_at_nodes(make_tensor):
    """Test integer coordinates return the exact grid value."""
    x = make_tensor(1, 2, 4, 5)
    assert bilinear_sample(x, 0, 1, 2.0, 3.0) == x.data[0, 1, 2, 3]
    assert bilinear_sample(x, 0, 0, 0.0, 0.0) == x.data[0, 0, 0, 0]


def test_sample_fully_outside_is_zero(make_tensor):
    """Test a coordinate far outside the map samples zero."""
    x = make_tensor(1, 1, 4, 4)
    assert bilinear_sample(x, 0, 0, -5.0, -5.0) == 0.0


def test_sample_partial_overlap_uses_zero_corners():
    """Test half a pixel beyond the edge blends with zero."""
    x = Tensor.full((1, 1, 3, 3), 2.0)
    assert bilinear_sample(x, 0, 0, 1.0, 2.5) == pytest.approx(1.0, abs=1e-15)
    assert bilinear_sample(x, 0, 0, 1.5, 1.5) == pytest.approx(2.0, abs=1e-15)


def test_sample_coordinate_gradient(make_tensor):
    """Test d/dy and d/dx match central differences at a non-integer point."""
    x = make_tensor(1, 1, 5, 5)
    y, xc, step = 1.3, 2.6, 1e-6
    grad = bilinear_sample_vjp(x, 0, 0, y, xc)
    fd_y = (bilinear_sample(x, 0, 0, y + step, xc) - bilinear_sample(x, 0, 0, y - step, xc)) / (2 * step)
    fd_x = (bilinear_sample(x, 0, 0, y, xc + step) - bilinear_sample(x, 0, 0, y, xc - step)) / (2 * step)
    assert grad.grad_y == pytest.approx(fd_y, rel=1e-5, abs=1e-9)
    assert grad.grad_x == pytest.approx(fd_x, rel=1e-5, abs=1e-9)
    assert grad.grad_input.data.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("stride,bias", [(1, False), (2, False), (1, True), (2, True)])
def test_zero_offsets_match_conv_bitwise(make_tensor, make_kernel, stride, bias):
    """Test deform_conv2d with zero offsets is bitwise conv2d."""
    x = make_tensor(2, 3, 9, 8)
    k = make_kernel(4, 3, stride=stride, bias=bias)
    np.testing.assert_array_equal(deform_conv2d(x, k, zero_offsets(x, k)).data, conv2d(x, k).data)


def test_uniform_offset_shifts_left(make_tensor):
    """Test a 1x1 identity kernel with offset (0, +1) shifts the map left with zero fill."""
    x = make_tensor(1, 1, 4, 5)
    k = Conv2dKernel.create(np.ones((1, 1, 1, 1)))
    out = deform_conv2d(x, k, uniform_offsets(x, k, 0.0, 1.0)).data
    np.testing.assert_array_equal(out[..., :-1], x.data[..., 1:])
    np.testing.assert_array_equal(out[..., -1], 0.0)


@pytest.mark.parametrize("seed,stride", [(0, 1), (1, 2), (2, 1)])
def test_random_offsets_match_naive_oracle(seed, stride):
    """Test small random offsets against the per-point oracle."""
    rng = np.random.default_rng(seed)
    x = Tensor.random((1, 2, 6, 7), rng)
    k = Conv2dKernel.create(rng.uniform(-1, 1, (3, 2, 3, 3)), rng.uniform(-1, 1, 3), stride=stride)
    h_out, w_out = conv_output_hw(x, k)
    off = Tensor(rng.uniform(-0.5, 0.5, (1, offset_channels(k), h_out, w_out)))
    np.testing.assert_allclose(deform_conv2d(x, k, off).data, naive_deform_conv2d(x, k, off), rtol=0, atol=1e-12)


def test_linear_in_input_and_kernel(make_tensor, make_kernel, rng):
    """Test superposition in x and in the weights for fixed offsets."""
    x, y = make_tensor(1, 2, 6, 6), make_tensor(1, 2, 6, 6)
    k1, k2 = make_kernel(2, 2), make_kernel(2, 2)
    off = Tensor(rng.uniform(-1.5, 1.5, (1, 18, 6, 6)))
    combined = deform_conv2d(x * 2.0 + y * -0.5, k1, off).data
    expected = 2.0 * deform_conv2d(x, k1, off).data - 0.5 * deform_conv2d(y, k1, off).data
    np.testing.assert_allclose(combined, expected, rtol=0, atol=1e-12)
    k_sum = k1.with_arrays(k1.weights.data + k2.weights.data)
    np.testing.assert_allclose(deform_conv2d(x, k_sum, off).data,
                               deform_conv2d(x, k1, off).data + deform_conv2d(x, k2, off).data, rtol=0, atol=1e-12)


def test_offset_shape_mismatch(make_tensor, make_kernel):
    """Test offsets for the wrong grid raise OffsetShapeError."""
    x = make_tensor(1, 2, 6, 6)
    k = make_kernel(2, 2, stride=2)
    with pytest.raises(OffsetShapeError):
        deform_conv2d(x, k, Tensor.zeros((1, 18, 6, 6)))
    with pytest.raises(OffsetShapeError):
        deform_conv2d(x, k, Tensor.zeros((1, 8, 3, 3)))


def test_zero_offset_vjp_matches_conv_gradients(make_tensor, make_kernel, rng):
    """Test input and weight gradients at zero offsets equal the conv2d ones."""
    x = make_tensor(1, 2, 5, 5)
    k = make_kernel(3, 2, bias=True)
    g = Tensor(rng.uniform(-1, 1, (1, 3, 5, 5)))
    deform = deform_conv2d_vjp(x, k, zero_offsets(x, k), g)
    plain = conv2d_vjp(x, k, g)
    np.testing.assert_allclose(deform.grad_input.data, plain.grad_input.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(deform.grad_weights.data, plain.grad_weights.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(deform.grad_bias, plain.grad_bias, rtol=0, atol=1e-12)


def test_offset_gradient_matches_finite_differences(make_tensor, make_kernel, rng):
    """Test the offset gradient away from the integer lattice."""
    x = make_tensor(1, 1, 5, 5)
    k = make_kernel(1, 1)
    off_data = rng.uniform(0.1, 0.4, (1, 18, 5, 5))
    g = Tensor(rng.uniform(-1, 1, (1, 1, 5, 5)))
    grad = deform_conv2d_vjp(x, k, Tensor(off_data), g).grad_offset.data
    step = 1e-6
    for index in [(0, 0, 2, 2), (0, 7, 1, 3), (0, 16, 4, 0)]:
        plus, minus = off_data.copy(), off_data.copy()
        plus[index] += step
        minus[index] -= step
        fd = (np.sum(g.data * deform_conv2d(x, k, Tensor(plus)).data)
              - np.sum(g.data * deform_conv2d(x, k, Tensor(minus)).data)) / (2 * step)
        assert grad[index] == pytest.approx(fd, rel=1e-5, abs=1e-8)
