"""Tests for feature pyramids and pyramid convolution."""

import numpy as np
import pytest

from src.core.ops import conv2d, conv2d_vjp, fit_spatial, upsample_bilinear_x2
from src.core.pyramid import (ChannelMismatchError, EmptyPyramidError, FeaturePyramid, PConvLayer, pconv_forward,
                              pconv_vjp)
from src.core.tensor import Conv2dKernel, ShapeError, Tensor
from tests.core.test_ops import naive_conv2d


def reference_pconv(p, layer):
    """Materialize each term separately with the naive convolution loop."""
    def conv(x, k):
        return Tensor(naive_conv2d(x.data, k.weights.data, k.bias, k.stride, k.padding))

    outputs = []
    for l, x in enumerate(p.levels):
        total = conv(x, layer.w_same).data.copy()
        if l > 0:
            total += fit_spatial(conv(p[l - 1], layer.w_down), x.h, x.w).data
        if l < len(p) - 1:
            total += fit_spatial(upsample_bilinear_x2(conv(p[l + 1], layer.w_up)), x.h, x.w).data
        outputs.append(total)
    return outputs


def ones_layer(c=1):
    ones = np.ones((c, c, 3, 3))
    return PConvLayer(Conv2dKernel.create(ones), Conv2dKernel.create(ones), Conv2dKernel.create(ones, stride=2))


def test_pyramid_validation():
    """Test empty pyramids and mismatched levels are rejected."""
    with pytest.raises(EmptyPyramidError):
        FeaturePyramid(())
    with pytest.raises(ChannelMismatchError):
        FeaturePyramid((Tensor.zeros((1, 2, 8, 8)), Tensor.zeros((1, 3, 4, 4))))
    with pytest.raises(ShapeError):
        FeaturePyramid((Tensor.zeros((1, 2, 8, 8)), Tensor.zeros((2, 2, 4, 4))))
    with pytest.raises(ShapeError):
        FeaturePyramid((Tensor.zeros((1, 2, 16, 16)), Tensor.zeros((1, 2, 4, 4))))


def test_from_sizes_ceil_halves():
    """Test from_sizes halves with ceil and names levels from P3."""
    p = FeaturePyramid.from_sizes(1, 2, 13, 10, 5)
    assert p.sizes == [(13, 10), (7, 5), (4, 3), (2, 2), (1, 1)]
    assert p.names == ["P3", "P4", "P5", "P6", "P7"]
    assert all(np.all(level.data == 0) for level in p.levels)


def test_layer_validation(make_kernel):
    """Test the stride pattern and shared geometry are enforced."""
    w = make_kernel(2, 2)
    with pytest.raises(ValueError):
        PConvLayer(w, w_up=make_kernel(2, 2))
    with pytest.raises(ValueError):
        PConvLayer(w, make_kernel(2, 2), make_kernel(2, 2, stride=1))
    with pytest.raises(ChannelMismatchError):
        PConvLayer(w, make_kernel(3, 2), make_kernel(3, 2, stride=2))


def test_single_level_is_conv(make_pyramid, rng):
    """Test a 1-level pyramid reduces to conv2d with w_same."""
    p = make_pyramid(c=2, base=6, levels=1)
    layer = PConvLayer.init(2, 3, rng)
    out = pconv_forward(p, layer)
    np.testing.assert_array_equal(out[0].data, conv2d(p[0], layer.w_same).data)


def test_identity_same_kernel(make_pyramid):
    """Test a 1x1 identity w_same without neighbors returns the input."""
    p = make_pyramid(c=2, base=8, levels=3)
    layer = PConvLayer(Conv2dKernel.create(np.eye(2).reshape(2, 2, 1, 1)))
    out = pconv_forward(p, layer)
    for a, b in zip(out.levels, p.levels):
        np.testing.assert_array_equal(a.data, b.data)


def test_constant_pyramid_middle_level():
    """Test all-ones kernels on a constant pyramid give 27v inside the middle level."""
    v = 1.5
    p = FeaturePyramid(tuple(Tensor.full((1, 1, s, s), v) for s in (16, 8, 4)))
    out = pconv_forward(p, ones_layer())
    assert out[1].data[0, 0, 3, 3] == pytest.approx(27 * v, abs=1e-12)
    assert out[1].data[0, 0, 4, 4] == pytest.approx(27 * v, abs=1e-12)
    assert out[0].data[0, 0, 5, 5] == pytest.approx(18 * v, abs=1e-12)
    assert out[2].data[0, 0, 1, 1] == pytest.approx(18 * v, abs=1e-12)


@pytest.mark.parametrize("base_h,base_w", [(16, 16), (13, 10)])
def test_matches_naive_reference(rng, base_h, base_w):
    """Test a 5-level pyramid against the term-by-term reference."""
    p = FeaturePyramid.from_sizes(1, 2, base_h, base_w, 5, rng)
    layer = PConvLayer.init(2, 3, rng)
    out = pconv_forward(p, layer)
    for got, expected in zip(out.levels, reference_pconv(p, layer)):
        np.testing.assert_allclose(got.data, expected, rtol=0, atol=1e-12)


def test_preserves_dims(make_pyramid, rng):
    """Test level count and per-level dims survive, odd sizes included."""
    p = make_pyramid(n=2, c=2, base=11, levels=4, base_w=9)
    out = pconv_forward(p, PConvLayer.init(2, 4, rng))
    assert len(out) == len(p)
    assert out.sizes == p.sizes
    assert out.c == 4 and out.n == 2


def test_linear_in_input(make_pyramid, rng):
    """Test superposition within 1e-12."""
    a, b = make_pyramid(levels=3), make_pyramid(levels=3)
    layer = PConvLayer.init(2, 2, rng)
    combined = pconv_forward(a * 3.0 + b * -2.0, layer)
    expected = pconv_forward(a, layer) * 3.0 + pconv_forward(b, layer) * -2.0
    for got, want in zip(combined.levels, expected.levels):
        np.testing.assert_allclose(got.data, want.data, rtol=0, atol=1e-12)


def test_channel_mismatch(make_pyramid, rng):
    """Test a layer expecting other channels raises."""
    with pytest.raises(ChannelMismatchError):
        pconv_forward(make_pyramid(c=2), PConvLayer.init(3, 3, rng))


def test_vjp_zero_cotangent(make_pyramid, rng):
    """Test a zero cotangent gives zero gradients everywhere."""
    p = make_pyramid(levels=3)
    layer = PConvLayer.init(2, 2, rng)
    grad_p, grads = pconv_vjp(p, layer, pconv_forward(p, layer).zeros_like())
    assert all(np.all(level.data == 0) for level in grad_p.levels)
    assert set(grads) == {"w_same", "w_up", "w_down"}
    assert all(np.all(g.weights == 0) for g in grads.values())


def test_single_level_vjp_is_conv_vjp(make_pyramid, rng):
    """Test the 1-level VJP equals conv2d_vjp."""
    p = make_pyramid(c=2, base=6, levels=1)
    layer = PConvLayer.init(2, 2, rng)
    g = FeaturePyramid((Tensor.random((1, 2, 6, 6), rng),))
    grad_p, grads = pconv_vjp(p, layer, g)
    expected = conv2d_vjp(p[0], layer.w_same, g[0])
    np.testing.assert_array_equal(grad_p[0].data, expected.grad_input.data)
    np.testing.assert_array_equal(grads["w_same"].weights, expected.grad_weights.data)
    assert "w_up" not in grads and "w_down" not in grads


def test_vjp_adjoint_identity(make_pyramid, rng, pyramid_dot):
    """Test <g, PConv(p)> equals <grad_p, p> and <grad_w, w> summed over kernels."""
    p = make_pyramid(c=2, base=9, levels=3)
    layer = PConvLayer.init(2, 3, rng)
    out = pconv_forward(p, layer)
    g = FeaturePyramid.from_sizes(1, 3, 9, 9, 3, rng)
    grad_p, grads = pconv_vjp(p, layer, g)
    value = pyramid_dot(g, out)
    assert pyramid_dot(grad_p, p) == pytest.approx(value, rel=1e-10)
    by_weights = sum(float(np.sum(grads[name].weights * k.weights.data)) for name, k in layer.parameters().items())
    assert by_weights == pytest.approx(value, rel=1e-10)
