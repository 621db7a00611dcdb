"""Stacked pyramid-convolution detection head.

Layout (combined): input -> stacks x [PConv -> BN -> ReLU] shared by both
branches -> per branch an extra scale-extent-1 PConv -> BN -> ReLU -> optional
3x3 output conv (K*C channels for classification, 4K for localization).
Without ``combined`` each branch runs its own stacks. Output convolutions have
a bias and no BN/ReLU.

Parameters are addressed by flat names such as ``shared.0.w_up.weights``,
``cls.extra.bn.gamma`` or ``loc.out.bias``; head_vjp returns gradients under the
same names.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ..utils.logging import setup_logger
from .config import HeadConfig
from .norm import BNState, bn_forward, bn_vjp
from .ops import conv2d, conv2d_vjp, relu, relu_vjp
from .pyramid import ChannelMismatchError, FeaturePyramid, PConvLayer, PyramidLayer
from .tensor import Conv2dKernel

logger = setup_logger(__name__)

BRANCHES = ("cls", "loc")
SHARED = "shared"

ArrayGrads = Dict[str, np.ndarray]
HeadPullback = Callable[[FeaturePyramid], Tuple[FeaturePyramid, ArrayGrads]]
Step = Callable[[FeaturePyramid], Tuple[FeaturePyramid, HeadPullback]]


@dataclass(eq=False)
class HeadParams:
    """All layers of a head, keyed by branch ("shared" for combined stacks, "cls", "loc")."""
    stacks: Dict[str, List[PyramidLayer]]
    stack_bns: Dict[str, List[Optional[BNState]]]
    extras: Dict[str, PyramidLayer] = field(default_factory=dict)
    extra_bns: Dict[str, Optional[BNState]] = field(default_factory=dict)
    outputs: Dict[str, Conv2dKernel] = field(default_factory=dict)

    def modules(self) -> Iterator[Tuple[str, PyramidLayer, Optional[BNState]]]:
        for branch, layers in self.stacks.items():
            bns = self.stack_bns.get(branch, [None] * len(layers))
            for i, (layer, bn) in enumerate(zip(layers, bns)):
                yield f"{branch}.{i}", layer, bn
        for branch, layer in self.extras.items():
            yield f"{branch}.extra", layer, self.extra_bns.get(branch)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Every trainable array under its flat name."""
        out: Dict[str, np.ndarray] = {}
        for prefix, layer, bn in self.modules():
            for name, k in layer.parameters().items():
                _kernel_arrays(out, f"{prefix}.{name}", k)
            if bn is not None:
                out[f"{prefix}.bn.gamma"] = bn.gamma
                out[f"{prefix}.bn.beta"] = bn.beta
        for branch, k in self.outputs.items():
            _kernel_arrays(out, f"{branch}.out", k)
        return out

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "HeadParams":
        """Copy with the named arrays replaced; names not given keep their values."""

        def kernel(prefix: str, k: Conv2dKernel) -> Conv2dKernel:
            weights = arrays.get(f"{prefix}.weights", k.weights.data)
            bias = arrays.get(f"{prefix}.bias", k.bias)
            return k.with_arrays(weights, bias)

        def layer(prefix: str, lay: PyramidLayer) -> PyramidLayer:
            return lay.with_parameters({name: kernel(f"{prefix}.{name}", k) for name, k in lay.parameters().items()})

        def norm(prefix: str, bn: Optional[BNState]) -> Optional[BNState]:
            if bn is None:
                return None
            return dataclasses.replace(
                bn,
                gamma=np.array(arrays.get(f"{prefix}.bn.gamma", bn.gamma), dtype=np.float64),
                beta=np.array(arrays.get(f"{prefix}.bn.beta", bn.beta), dtype=np.float64),
                running_mean=bn.running_mean.copy(),
                running_var=bn.running_var.copy(),
            )

        return HeadParams(
            stacks={b: [layer(f"{b}.{i}", lay) for i, lay in enumerate(ls)] for b, ls in self.stacks.items()},
            stack_bns={b: [norm(f"{b}.{i}", bn) for i, bn in enumerate(bns)] for b, bns in self.stack_bns.items()},
            extras={b: layer(f"{b}.extra", lay) for b, lay in self.extras.items()},
            extra_bns={b: norm(f"{b}.extra", bn) for b, bn in self.extra_bns.items()},
            outputs={b: kernel(f"{b}.out", k) for b, k in self.outputs.items()},
        )

    def replace_layers(self, stacks: Optional[Dict[str, List[PyramidLayer]]] = None,
                       extras: Optional[Dict[str, PyramidLayer]] = None) -> "HeadParams":
        return dataclasses.replace(self, stacks=stacks if stacks is not None else self.stacks,
                                   extras=extras if extras is not None else self.extras)

    def set_training(self, training: bool):
        for _, _, bn in self.modules():
            if bn is not None:
                bn.training = training


def _kernel_arrays(out: Dict[str, np.ndarray], prefix: str, k: Conv2dKernel):
    out[f"{prefix}.weights"] = k.weights.data
    if k.bias is not None:
        out[f"{prefix}.bias"] = k.bias


def init_head_params(cfg: HeadConfig, levels: int) -> HeadParams:
    """
    Seeded initialization of a plain (non-SEPC) head.

    Args:
        cfg (HeadConfig): Head configuration; cfg.seed drives the generator
        levels (int): Pyramid level count, needed by per-level BN statistics

    Returns:
        HeadParams: Kaiming-initialized PConv stacks and extra convs, output convs
            drawn from N(0, 0.01^2) with zero bias, BN with gamma 1 and beta 0
    """
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels

    def bn() -> Optional[BNState]:
        return BNState.create(cfg.bn_mode, c, levels) if cfg.bn_mode is not None else None

    stack_branches = [SHARED] if cfg.combined else list(BRANCHES)
    stacks = {b: [PConvLayer.init(c, c, rng, extent=cfg.scale_kernel) for _ in range(cfg.stacks)]
              for b in stack_branches}
    stack_bns = {b: [bn() for _ in range(cfg.stacks)] for b in stack_branches}
    extras: Dict[str, PyramidLayer] = {}
    extra_bns: Dict[str, Optional[BNState]] = {}
    if cfg.extra_conv:
        for b in BRANCHES:
            extras[b] = PConvLayer.init(c, c, rng, extent=1)
            extra_bns[b] = bn()
    outputs: Dict[str, Conv2dKernel] = {}
    if cfg.outputs is not None:
        num_classes, anchors = cfg.outputs
        for b, c_out in (("cls", anchors * num_classes), ("loc", 4 * anchors)):
            outputs[b] = Conv2dKernel.create(rng.normal(0.0, 0.01, size=(c_out, c, 3, 3)), np.zeros(c_out))
    logger.debug(f"Initialized head: stacks={cfg.stacks}, channels={c}, combined={cfg.combined}, "
                 f"bn_mode={cfg.bn_mode}, outputs={cfg.outputs}")
    return HeadParams(stacks, stack_bns, extras, extra_bns, outputs)


def _prefixed(prefix: str, grads: Mapping) -> ArrayGrads:
    out: ArrayGrads = {}
    for name, grad in grads.items():
        out[f"{prefix}.{name}.weights"] = grad.weights
        if grad.bias is not None:
            out[f"{prefix}.{name}.bias"] = grad.bias
    return out


def _merge(into: ArrayGrads, extra: ArrayGrads) -> ArrayGrads:
    for name, grad in extra.items():
        into[name] = into[name] + grad if name in into else grad
    return into


def _layer_step(prefix: str, layer: PyramidLayer) -> Step:
    def step(x: FeaturePyramid):
        out = layer.forward(x)

        def pullback(g: FeaturePyramid):
            grad_x, grads = layer.vjp(x, g)
            return grad_x, _prefixed(prefix, grads)

        return out, pullback

    return step


def _bn_step(prefix: str, bn: BNState) -> Step:
    def step(x: FeaturePyramid):
        out = bn_forward(x, bn)

        def pullback(g: FeaturePyramid):
            grad_x, grads = bn_vjp(x, bn, g)
            return grad_x, {f"{prefix}.bn.gamma": grads.gamma, f"{prefix}.bn.beta": grads.beta}

        return out, pullback

    return step


def _relu_step(x: FeaturePyramid):
    out = x.map(relu)

    def pullback(g: FeaturePyramid):
        return x.with_levels(relu_vjp(a, b) for a, b in zip(x.levels, g.levels)), {}

    return out, pullback


def _output_step(prefix: str, k: Conv2dKernel) -> Step:
    def step(x: FeaturePyramid):
        out = x.map(lambda level: conv2d(level, k))

        def pullback(g: FeaturePyramid):
            grads: ArrayGrads = {}
            grad_levels = []
            for level, g_level in zip(x.levels, g.levels):
                triple = conv2d_vjp(level, k, g_level)
                grad_levels.append(triple.grad_input)
                _merge(grads, {f"{prefix}.weights": triple.grad_weights.data})
                if triple.grad_bias is not None:
                    _merge(grads, {f"{prefix}.bias": triple.grad_bias})
            return x.with_levels(grad_levels), grads

        return out, pullback

    return step


def _block_steps(prefix: str, layer: PyramidLayer, bn: Optional[BNState]) -> List[Step]:
    steps = [_layer_step(prefix, layer)]
    if bn is not None:
        steps.append(_bn_step(prefix, bn))
    steps.append(_relu_step)
    return steps


def _run_chain(x: FeaturePyramid, steps: List[Step]) -> Tuple[FeaturePyramid, HeadPullback]:
    pullbacks = []
    for step in steps:
        x, pullback = step(x)
        pullbacks.append(pullback)

    def chain_pullback(g: FeaturePyramid):
        grads: ArrayGrads = {}
        for pullback in reversed(pullbacks):
            g, step_grads = pullback(g)
            _merge(grads, step_grads)
        return g, grads

    return x, chain_pullback


def _stack_steps(params: HeadParams, branch: str) -> List[Step]:
    steps: List[Step] = []
    layers = params.stacks.get(branch, [])
    bns = params.stack_bns.get(branch, [None] * len(layers))
    for i, (layer, bn) in enumerate(zip(layers, bns)):
        steps.extend(_block_steps(f"{branch}.{i}", layer, bn))
    return steps


def _tail_steps(params: HeadParams, branch: str) -> List[Step]:
    steps: List[Step] = []
    if branch in params.extras:
        steps.extend(_block_steps(f"{branch}.extra", params.extras[branch], params.extra_bns.get(branch)))
    if branch in params.outputs:
        steps.append(_output_step(f"{branch}.out", params.outputs[branch]))
    return steps


def _check_input(p: FeaturePyramid, cfg: HeadConfig, params: HeadParams):
    if p.c != cfg.channels:
        raise ChannelMismatchError(f"Shape mismatch on axis c: pyramid has {p.c} channels, head expects {cfg.channels}")
    expected = [SHARED] if cfg.combined else list(BRANCHES)
    if sorted(params.stacks) != sorted(expected):
        raise ValueError(f"Head parameters hold stacks {sorted(params.stacks)}, config expects {expected}")
    for branch, layers in params.stacks.items():
        if len(layers) != cfg.stacks:
            raise ValueError(f"Branch {branch} has {len(layers)} stacks, config expects {cfg.stacks}")


def head_value_and_pullback(p: FeaturePyramid, cfg: HeadConfig, params: HeadParams) -> Tuple[
        FeaturePyramid, FeaturePyramid, Callable[[FeaturePyramid, FeaturePyramid], Tuple[FeaturePyramid, ArrayGrads]]]:
    """
    Run the head once and return (cls, loc, pullback).

    Training-mode BN layers update their running statistics exactly once per call.
    """
    _check_input(p, cfg, params)
    if cfg.combined:
        shared, shared_pull = _run_chain(p, _stack_steps(params, SHARED))
        cls, cls_pull = _run_chain(shared, _tail_steps(params, "cls"))
        loc, loc_pull = _run_chain(shared, _tail_steps(params, "loc"))
    else:
        cls, cls_pull = _run_chain(p, _stack_steps(params, "cls") + _tail_steps(params, "cls"))
        loc, loc_pull = _run_chain(p, _stack_steps(params, "loc") + _tail_steps(params, "loc"))

    def pullback(grad_cls: FeaturePyramid, grad_loc: FeaturePyramid) -> Tuple[FeaturePyramid, ArrayGrads]:
        g_cls, grads = cls_pull(grad_cls)
        g_loc, loc_grads = loc_pull(grad_loc)
        _merge(grads, loc_grads)
        if cfg.combined:
            g_in, shared_grads = shared_pull(g_cls + g_loc)
            _merge(grads, shared_grads)
        else:
            g_in = g_cls + g_loc
        for name, array in params.arrays().items():
            if name not in grads:
                grads[name] = np.zeros_like(array)
        return g_in, grads

    return cls, loc, pullback


def head_forward(p: FeaturePyramid, cfg: HeadConfig, params: HeadParams) -> Tuple[FeaturePyramid, FeaturePyramid]:
    """Classification and localization pyramids of the head."""
    cls, loc, _ = head_value_and_pullback(p, cfg, params)
    return cls, loc


def head_vjp(p: FeaturePyramid, cfg: HeadConfig, params: HeadParams, grad_cls: FeaturePyramid,
             grad_loc: FeaturePyramid) -> Tuple[FeaturePyramid, ArrayGrads]:
    """Input and parameter gradients of sum(grad_cls * cls) + sum(grad_loc * loc)."""
    _, _, pullback = head_value_and_pullback(p, cfg, params)
    return pullback(grad_cls, grad_loc)
