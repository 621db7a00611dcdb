"""Scale-equalizing pyramid convolution (SEPC).

The PConv kernels are shared across levels, but every term reading a level above
the bottom of the pyramid applies its kernel as a deformable convolution. Offsets
come from one predictor per branch (same/up/down), shared across levels and
initialized to zero, so a fresh SEPC layer computes exactly what its base PConv
layer computes.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ..utils.logging import setup_logger
from .config import HeadConfig, SepcVariant
from .deform import deform_conv2d, deform_conv2d_vjp, offset_channels
from .head import HeadParams
from .ops import conv2d, conv2d_vjp
from .pyramid import (FeaturePyramid, Grads, ParamGrad, PConvLayer, Pullback, TermApply, plain_term,
                      pull_pyramid_terms, run_pyramid_terms)
from .tensor import Conv2dKernel, Tensor

logger = setup_logger(__name__)

PREDICTOR_PREFIX = "offset"


def predictor_name(kernel_name: str) -> str:
    """Offset predictor paired with a base kernel: w_up -> offset_up."""
    return f"{PREDICTOR_PREFIX}_{kernel_name.split('_', 1)[1]}"


def zero_predictor(k: Conv2dKernel) -> Conv2dKernel:
    """3x3, pad 1 offset predictor for k with zero weights and bias and k's stride."""
    return Conv2dKernel.zeros(offset_channels(k), k.c_in, k=3, stride=k.stride, bias=True)


@dataclass(frozen=True, eq=False)
class SepcLayer:
    """A PConv layer plus one offset predictor per branch."""
    base: PConvLayer
    offset_predictors: Dict[str, Conv2dKernel] = field(default_factory=dict)

    def __post_init__(self):
        predictors = dict(self.offset_predictors)
        for name, k in self.base.parameters().items():
            pred_name = predictor_name(name)
            if pred_name not in predictors:
                predictors[pred_name] = zero_predictor(k)
            pred = predictors[pred_name]
            if pred.c_out != offset_channels(k) or pred.c_in != k.c_in or pred.stride != k.stride:
                raise ValueError(
                    f"{pred_name} must map {k.c_in} channels to {offset_channels(k)} offsets at stride {k.stride}"
                )
        extra = set(predictors) - {predictor_name(name) for name in self.base.parameters()}
        if extra:
            raise ValueError(f"Offset predictors without a base kernel: {sorted(extra)}")
        object.__setattr__(self, "offset_predictors", predictors)

    @classmethod
    def from_base(cls, base: PConvLayer) -> "SepcLayer":
        return cls(base)

    @property
    def c_in(self) -> int:
        return self.base.c_in

    @property
    def c_out(self) -> int:
        return self.base.c_out

    def parameters(self) -> Dict[str, Conv2dKernel]:
        return {**self.base.parameters(), **self.offset_predictors}

    def with_parameters(self, kernels: Mapping[str, Conv2dKernel]) -> "SepcLayer":
        base_kernels = {name: k for name, k in kernels.items() if not name.startswith(PREDICTOR_PREFIX)}
        predictors = {**self.offset_predictors,
                      **{name: k for name, k in kernels.items() if name.startswith(PREDICTOR_PREFIX)}}
        return SepcLayer(self.base.with_parameters(base_kernels), predictors)

    def forward(self, p: FeaturePyramid) -> FeaturePyramid:
        return sepc_forward(p, self)

    def vjp(self, p: FeaturePyramid, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, Grads]:
        return sepc_vjp(p, self, grad_out)


def _deformable_terms(layer: SepcLayer) -> TermApply:
    def apply(name: str, source: int, x: Tensor, k: Conv2dKernel) -> Tuple[Tensor, Pullback]:
        if source == 0:
            return plain_term(name, source, x, k)
        pred_name = predictor_name(name)
        pred = layer.offset_predictors[pred_name]
        off = conv2d(x, pred)
        out = deform_conv2d(x, k, off)

        def pullback(grad: Tensor) -> Tuple[Tensor, Grads]:
            grads = deform_conv2d_vjp(x, k, off, grad)
            pred_grads = conv2d_vjp(x, pred, grads.grad_offset)
            return grads.grad_input + pred_grads.grad_input, {
                name: ParamGrad(grads.grad_weights.data, grads.grad_bias),
                pred_name: ParamGrad(pred_grads.grad_weights.data, pred_grads.grad_bias),
            }

        return out, pullback

    return apply


def sepc_forward(p: FeaturePyramid, layer: SepcLayer) -> FeaturePyramid:
    """PConv dataflow with deformable kernels on every level above the bottom."""
    out, _ = run_pyramid_terms(p, layer.base.parameters(), _deformable_terms(layer))
    return out


def sepc_vjp(p: FeaturePyramid, layer: SepcLayer, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, Grads]:
    """
    Gradients of sum_l sum(grad_out_l * sepc_forward(p, layer)_l).

    Returns:
        Tuple[FeaturePyramid, Grads]: Input-pyramid gradient, plus gradients keyed by the
            base kernel names and the offset predictor names
    """
    _, tape = run_pyramid_terms(p, layer.base.parameters(), _deformable_terms(layer))
    grad_p, grads = pull_pyramid_terms(p, tape, grad_out)
    for name in layer.offset_predictors:
        if name not in grads:
            pred = layer.offset_predictors[name]
            bias = np.zeros(pred.c_out) if pred.bias is not None else None
            grads[name] = ParamGrad(np.zeros(pred.weights.dims), bias)
    return grad_p, grads


def randomize_predictors(layer: SepcLayer, rng: np.random.Generator, scale: float = 1e-3,
                         bias_range: Optional[Tuple[float, float]] = None) -> SepcLayer:
    """Small random offset predictors, e.g. to make offsets non-trivial in tests and demos."""
    predictors = {}
    for name, pred in layer.offset_predictors.items():
        weights = rng.normal(0.0, scale, size=pred.weights.dims)
        if bias_range is None:
            bias = rng.normal(0.0, scale, size=pred.c_out)
        else:
            bias = rng.uniform(bias_range[0], bias_range[1], size=pred.c_out)
        predictors[name] = pred.with_arrays(weights, bias)
    return SepcLayer(layer.base, predictors)


def _as_sepc(layer) -> SepcLayer:
    if isinstance(layer, SepcLayer):
        return layer
    return SepcLayer.from_base(layer)


def build_head_variant(cfg: HeadConfig, params: HeadParams) -> HeadParams:
    """
    Apply cfg.sepc_variant to plain head parameters.

    none keeps every layer a plain PConv; lite turns the extra convolutions into SEPC
    layers; full turns the stacks and the extra convolutions into SEPC layers.

    Raises:
        ValueError: If the variant is unknown
    """
    variant = SepcVariant(cfg.sepc_variant)
    if variant == SepcVariant.NONE:
        return params
    extras = {branch: _as_sepc(layer) for branch, layer in params.extras.items()}
    stacks = params.stacks
    if variant == SepcVariant.FULL:
        stacks = {branch: [_as_sepc(layer) for layer in layers] for branch, layers in params.stacks.items()}
    logger.debug(f"Built {variant.value} head: {sum(len(v) for v in stacks.values())} stack layers, "
                 f"{len(extras)} extra layers")
    return params.replace_layers(stacks=stacks, extras=extras)
