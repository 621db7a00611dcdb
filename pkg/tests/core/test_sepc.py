"""Tests for scale-equalizing pyramid convolution and the head variants built on it."""

import numpy as np
import pytest

from src.core.config import HeadConfig
from src.core.head import head_forward, init_head_params
from src.core.ops import conv2d
from src.core.pyramid import FeaturePyramid, PConvLayer, pconv_forward
from src.core.sepc import SepcLayer, build_head_variant, randomize_predictors, sepc_forward, sepc_vjp
from src.core.tensor import Conv2dKernel


def assert_levels_equal(a, b):
    for x, y in zip(a.levels, b.levels):
        np.testing.assert_array_equal(x.data, y.data)


def with_variant(cfg, variant):
    return HeadConfig(**{**cfg.model_dump(), "sepc_variant": variant})


def levels_differ(a, b):
    return any(not np.allclose(x.data, y.data) for x, y in zip(a.levels, b.levels))


def randomized(params, seed):
    """Give every SEPC layer of the head non-trivial offset predictors."""
    rng = np.random.default_rng(seed)

    def visit(layer):
        if isinstance(layer, SepcLayer):
            return randomize_predictors(layer, rng, scale=0.05, bias_range=(0.1, 0.4))
        return layer

    return params.replace_layers(
        stacks={b: [visit(layer) for layer in layers] for b, layers in params.stacks.items()},
        extras={b: visit(layer) for b, layer in params.extras.items()},
    )


def test_fresh_layer_matches_pconv_bitwise(make_pyramid, rng):
    """Test zero-initialized predictors reproduce PConv exactly."""
    p = make_pyramid(n=2, c=2, base=11, levels=4)
    base = PConvLayer.init(2, 3, rng)
    layer = SepcLayer.from_base(base)
    assert set(layer.offset_predictors) == {"offset_same", "offset_up", "offset_down"}
    assert all(np.all(k.weights.data == 0) and np.all(k.bias == 0) for k in layer.offset_predictors.values())
    assert_levels_equal(sepc_forward(p, layer), pconv_forward(p, base))


def test_single_level_is_plain_conv(make_pyramid, rng):
    """Test the bottom level is never deformed."""
    p = make_pyramid(c=2, base=7, levels=1)
    base = PConvLayer.init(2, 2, rng)
    layer = randomize_predictors(SepcLayer.from_base(base), rng, scale=0.1, bias_range=(0.1, 0.4))
    np.testing.assert_array_equal(sepc_forward(p, layer)[0].data, conv2d(p[0], base.w_same).data)


def test_bottom_level_anchoring(make_pyramid, rng):
    """Test down-branch offsets only reach levels that read a deformed lower neighbor."""
    p = make_pyramid(c=2, base=16, levels=3)
    base = PConvLayer.init(2, 2, rng)
    pred = SepcLayer.from_base(base).offset_predictors["offset_down"]
    layer = SepcLayer.from_base(base).with_parameters({
        "offset_down": pred.with_arrays(rng.normal(0.0, 0.1, pred.weights.dims), rng.uniform(0.1, 0.4, pred.c_out)),
    })
    plain = pconv_forward(p, base)
    out = sepc_forward(p, layer)
    np.testing.assert_array_equal(out[0].data, plain[0].data)
    np.testing.assert_array_equal(out[1].data, plain[1].data)
    assert not np.allclose(out[2].data, plain[2].data)


def test_same_only_layer_keeps_bottom(make_pyramid, rng):
    """Test an extent-1 SEPC layer changes every level except the bottom one."""
    p = make_pyramid(c=2, base=16, levels=3)
    base = PConvLayer.init(2, 2, rng, extent=1)
    layer = randomize_predictors(SepcLayer.from_base(base), rng, scale=0.1, bias_range=(0.1, 0.4))
    plain = pconv_forward(p, base)
    out = sepc_forward(p, layer)
    np.testing.assert_array_equal(out[0].data, plain[0].data)
    assert not np.allclose(out[1].data, plain[1].data)
    assert not np.allclose(out[2].data, plain[2].data)


def test_predictor_validation(rng):
    """Test mis-shaped or orphan predictors are rejected."""
    base = PConvLayer.init(2, 2, rng, extent=1)
    with pytest.raises(ValueError):
        SepcLayer(base, {"offset_same": Conv2dKernel.zeros(8, 2)})
    with pytest.raises(ValueError):
        SepcLayer(base, {"offset_up": Conv2dKernel.zeros(18, 2)})


def test_vjp_zero_cotangent_and_names(make_pyramid, rng):
    """Test zero cotangents give zero gradients for base kernels and predictors."""
    p = make_pyramid(c=2, levels=3)
    layer = randomize_predictors(SepcLayer.from_base(PConvLayer.init(2, 2, rng)), rng)
    grad_p, grads = sepc_vjp(p, layer, sepc_forward(p, layer).zeros_like())
    assert set(grads) == {"w_same", "w_up", "w_down", "offset_same", "offset_up", "offset_down"}
    assert all(np.all(level.data == 0) for level in grad_p.levels)
    assert all(np.all(g.weights == 0) for g in grads.values())


def test_vjp_single_level_predictor_gradients_are_zero(make_pyramid, rng):
    """Test predictors that no term uses still get zero gradients."""
    p = make_pyramid(c=2, levels=1)
    layer = SepcLayer.from_base(PConvLayer.init(2, 2, rng))
    g = FeaturePyramid.from_sizes(1, 2, 8, 8, 1, rng)
    _, grads = sepc_vjp(p, layer, g)
    assert np.all(grads["offset_same"].weights == 0)
    assert grads["offset_same"].bias.shape == (18,)


def test_variant_none_keeps_plain_layers():
    """Test variant none returns the plain parameters."""
    cfg = HeadConfig(channels=2, stacks=2, bn_mode="off")
    params = init_head_params(cfg, 3)
    assert build_head_variant(cfg, params) is params


@pytest.mark.parametrize("bn_mode", ["off", "integrated"])
def test_full_variant_at_init_matches_none_bitwise(rng, bn_mode):
    """Test zero-offset SEPC heads reproduce the plain head exactly."""
    cfg_none = HeadConfig(channels=2, stacks=2, bn_mode=bn_mode)
    cfg_full = with_variant(cfg_none, "full")
    p = FeaturePyramid.from_sizes(1, 2, 12, 12, 3, rng)
    cls_a, loc_a = head_forward(p, cfg_none, build_head_variant(cfg_none, init_head_params(cfg_none, 3)))
    cls_b, loc_b = head_forward(p, cfg_full, build_head_variant(cfg_full, init_head_params(cfg_full, 3)))
    assert_levels_equal(cls_a, cls_b)
    assert_levels_equal(loc_a, loc_b)


def test_lite_and_full_differ_on_stacks(rng):
    """Test randomized predictors change stack outputs for full only."""
    p = FeaturePyramid.from_sizes(1, 2, 12, 12, 3, rng)
    base = HeadConfig(channels=2, stacks=2, bn_mode="off", extra_conv=False)
    plain = init_head_params(base, 3)
    reference, _ = head_forward(p, base, plain)
    outputs = {}
    for variant in ("lite", "full"):
        cfg = with_variant(base, variant)
        outputs[variant], _ = head_forward(p, cfg, randomized(build_head_variant(cfg, plain), seed=5))
    assert_levels_equal(outputs["lite"], reference)
    assert levels_differ(outputs["full"], reference)
    assert outputs["full"].sizes == reference.sizes


def test_lite_deforms_the_extra_head(rng):
    """Test lite differs from none once the extra convolutions use offsets."""
    p = FeaturePyramid.from_sizes(1, 2, 12, 12, 3, rng)
    none = HeadConfig(channels=2, stacks=2, bn_mode="off")
    lite = with_variant(none, "lite")
    plain = init_head_params(none, 3)
    params = build_head_variant(lite, plain)
    assert all(isinstance(layer, SepcLayer) for layer in params.extras.values())
    assert not any(isinstance(layer, SepcLayer) for layer in params.stacks["shared"])
    cls_ref, _ = head_forward(p, none, plain)
    cls_lite, _ = head_forward(p, lite, randomized(params, seed=6))
    assert levels_differ(cls_lite, cls_ref)
