"""Finite-difference gradient oracle and the gradient-check suites.

Each suite builds a small random problem, evaluates L = sum(g * f(theta)) for a
random cotangent g, and compares the reverse-mode gradient of every input with
central differences.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from ..utils.logging import setup_logger
from .config import BNMode, HeadConfig
from .deform import bilinear_sample, bilinear_sample_vjp, deform_conv2d, deform_conv2d_vjp
from .head import head_forward, head_vjp, init_head_params
from .norm import BNState, bn_forward, bn_vjp
from .ops import conv2d, conv2d_vjp, upsample_bilinear_x2, upsample_bilinear_x2_vjp
from .pyramid import FeaturePyramid, PConvLayer, pconv_forward, pconv_vjp
from .sepc import SepcLayer, randomize_predictors, sepc_forward, sepc_vjp
from .tensor import Conv2dKernel, Tensor

logger = setup_logger(__name__)

DEFAULT_STEP = 1e-5
LINEAR_TOLERANCE = 1e-5
NONLINEAR_TOLERANCE = 1e-4


def finite_diff_array(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    base = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f(base.copy())
        flat[i] = orig - step
        minus = f(base.copy())
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, step: float = DEFAULT_STEP) -> Tensor:
    """(f(x + step e_i) - f(x - step e_i)) / (2 step) for every element i of x."""
    return Tensor(finite_diff_array(lambda arr: f(Tensor(arr)), x.data, step))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a - b| / max(max|a|, max|b|); 0 when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    diff = float(np.max(np.abs(a - b)))
    if scale == 0.0:
        return diff
    return diff / scale


@dataclass(frozen=True)
class GradcheckResult:
    suite: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def _pyramid_dot(g: FeaturePyramid, p: FeaturePyramid) -> float:
    return float(sum(np.sum(a.data * b.data) for a, b in zip(g.levels, p.levels)))


def _pyramid_arrays(p: FeaturePyramid) -> np.ndarray:
    return np.concatenate([level.data.ravel() for level in p.levels])


def _pyramid_from_flat(template: FeaturePyramid, flat: np.ndarray) -> FeaturePyramid:
    levels, offset = [], 0
    for level in template.levels:
        levels.append(Tensor(flat[offset:offset + level.size].reshape(level.dims)))
        offset += level.size
    return template.with_levels(levels)


def _check_pyramid_input(loss: Callable[[FeaturePyramid], float], p: FeaturePyramid, analytic: FeaturePyramid) -> float:
    numeric = finite_diff_array(lambda flat: loss(_pyramid_from_flat(p, flat)), _pyramid_arrays(p))
    return relative_error(_pyramid_arrays(analytic), numeric)


def _check_layer_kernels(loss: Callable[[Dict[str, Conv2dKernel]], float], kernels: Dict[str, Conv2dKernel],
                         grads) -> float:
    worst = 0.0
    for name, k in kernels.items():
        numeric = finite_diff_array(lambda w: loss({**kernels, name: k.with_arrays(w)}), k.weights.data)
        worst = max(worst, relative_error(grads[name].weights, numeric))
        if k.bias is not None:
            numeric = finite_diff_array(lambda b: loss({**kernels, name: k.with_arrays(k.weights.data, b)}), k.bias)
            worst = max(worst, relative_error(grads[name].bias, numeric))
    return worst


def check_conv2d(rng: np.random.Generator) -> float:
    x = Tensor.random((2, 3, 5, 5), rng)
    k = Conv2dKernel.create(rng.uniform(-1, 1, (4, 3, 3, 3)), rng.uniform(-1, 1, 4), stride=2)
    g = Tensor.random(conv2d(x, k).dims, rng)
    grads = conv2d_vjp(x, k, g)

    def loss(x_, k_):
        return float(np.sum(g.data * conv2d(x_, k_).data))

    errors = [
        relative_error(grads.grad_input.data, finite_diff_grad(lambda t: loss(t, k), x).data),
        relative_error(grads.grad_weights.data, finite_diff_array(lambda w: loss(x, k.with_arrays(w)), k.weights.data)),
        relative_error(grads.grad_bias, finite_diff_array(lambda b: loss(x, k.with_arrays(k.weights.data, b)), k.bias)),
    ]
    return max(errors)


def check_upsample(rng: np.random.Generator) -> float:
    x = Tensor.random((1, 2, 4, 4), rng)
    g = Tensor.random((1, 2, 8, 8), rng)
    analytic = upsample_bilinear_x2_vjp(x, g)
    numeric = finite_diff_grad(lambda t: float(np.sum(g.data * upsample_bilinear_x2(t).data)), x)
    return relative_error(analytic.data, numeric.data)


def lattice_free_offsets(rng: np.random.Generator, dims) -> Tensor:
    """Offsets with integer part in {-1, 0, 1} and fractional part in (0.1, 0.4)."""
    return Tensor(rng.integers(-1, 2, size=dims) + rng.uniform(0.1, 0.4, size=dims))


def check_bilinear_sample(rng: np.random.Generator) -> float:
    x = Tensor.random((1, 1, 5, 6), rng)
    worst = 0.0
    for y, xc in ((1.3, 2.2), (3.35, 0.15), (-0.7, 4.25), (4.2, 5.3)):
        grads = bilinear_sample_vjp(x, 0, 0, y, xc)
        num_y = finite_diff_array(lambda v: bilinear_sample(x, 0, 0, float(v[0]), xc), np.array([y]))
        num_x = finite_diff_array(lambda v: bilinear_sample(x, 0, 0, y, float(v[0])), np.array([xc]))
        num_map = finite_diff_grad(lambda t: bilinear_sample(t, 0, 0, y, xc), x)
        worst = max(worst, relative_error(np.array([grads.grad_y, grads.grad_x]), np.concatenate([num_y, num_x])),
                    relative_error(grads.grad_input.data, num_map.data))
    return worst


def check_deform_conv2d(rng: np.random.Generator) -> float:
    x = Tensor.random((1, 2, 5, 5), rng)
    k = Conv2dKernel.create(rng.uniform(-1, 1, (3, 2, 3, 3)), rng.uniform(-1, 1, 3))
    h_out, w_out = k.output_hw(x.h, x.w)
    off = lattice_free_offsets(rng, (1, 18, h_out, w_out))
    g = Tensor.random((1, 3, h_out, w_out), rng)
    grads = deform_conv2d_vjp(x, k, off, g)

    def loss(x_, k_, off_):
        return float(np.sum(g.data * deform_conv2d(x_, k_, off_).data))

    errors = [
        relative_error(grads.grad_input.data, finite_diff_grad(lambda t: loss(t, k, off), x).data),
        relative_error(grads.grad_weights.data,
                       finite_diff_array(lambda w: loss(x, k.with_arrays(w), off), k.weights.data)),
        relative_error(grads.grad_offset.data, finite_diff_grad(lambda o: loss(x, k, o), off).data),
    ]
    return max(errors)


def check_pconv(rng: np.random.Generator) -> float:
    p = FeaturePyramid.from_sizes(1, 2, 6, 6, 3, rng)
    layer = PConvLayer.init(2, 2, rng)
    g = FeaturePyramid.from_sizes(1, 2, 6, 6, 3, rng)
    grad_p, grads = pconv_vjp(p, layer, g)
    worst = _check_pyramid_input(lambda q: _pyramid_dot(g, pconv_forward(q, layer)), p, grad_p)
    kernel_loss = lambda ks: _pyramid_dot(g, pconv_forward(p, layer.with_parameters(ks)))
    return max(worst, _check_layer_kernels(kernel_loss, layer.parameters(), grads))


def check_sepc(rng: np.random.Generator) -> float:
    p = FeaturePyramid.from_sizes(1, 2, 6, 6, 3, rng)
    layer = randomize_predictors(SepcLayer.from_base(PConvLayer.init(2, 2, rng)), rng,
                                 scale=1e-3, bias_range=(0.15, 0.35))
    g = FeaturePyramid.from_sizes(1, 2, 6, 6, 3, rng)
    grad_p, grads = sepc_vjp(p, layer, g)
    worst = _check_pyramid_input(lambda q: _pyramid_dot(g, sepc_forward(q, layer)), p, grad_p)
    kernel_loss = lambda ks: _pyramid_dot(g, sepc_forward(p, layer.with_parameters(ks)))
    return max(worst, _check_layer_kernels(kernel_loss, layer.parameters(), grads))


def check_bn(rng: np.random.Generator) -> float:
    worst = 0.0
    for mode in BNMode:
        p = FeaturePyramid.from_sizes(2, 3, 4, 4, 3, rng)
        g = FeaturePyramid.from_sizes(2, 3, 4, 4, 3, rng)
        state = BNState.create(mode, 3, len(p))
        state.gamma = rng.uniform(0.5, 1.5, state.gamma.shape)
        state.beta = rng.uniform(-0.5, 0.5, state.beta.shape)
        grad_p, grads = bn_vjp(p, state, g)
        worst = max(worst, _check_pyramid_input(lambda q: _pyramid_dot(g, bn_forward(q, state)), p, grad_p))
        gamma, beta = state.gamma.copy(), state.beta.copy()

        def with_affine(new_gamma, new_beta):
            state.gamma, state.beta = new_gamma, new_beta
            value = _pyramid_dot(g, bn_forward(p, state))
            state.gamma, state.beta = gamma, beta
            return value

        worst = max(worst,
                    relative_error(grads.gamma, finite_diff_array(lambda a: with_affine(a, beta), gamma)),
                    relative_error(grads.beta, finite_diff_array(lambda a: with_affine(gamma, a), beta)))
    return worst


def check_head(rng: np.random.Generator) -> float:
    cfg = HeadConfig(stacks=2, channels=2, num_classes=2, anchors=1, seed=int(rng.integers(0, 2**31)))
    p = FeaturePyramid.from_sizes(1, 2, 4, 4, 2, rng)
    params = init_head_params(cfg, len(p))
    cls, loc = head_forward(p, cfg, params)
    g_cls = cls.map(lambda t: Tensor.random(t.dims, rng))
    g_loc = loc.map(lambda t: Tensor.random(t.dims, rng))
    grad_p, grads = head_vjp(p, cfg, params, g_cls, g_loc)

    def loss(q: FeaturePyramid, prm) -> float:
        c, l = head_forward(q, cfg, prm)
        return _pyramid_dot(g_cls, c) + _pyramid_dot(g_loc, l)

    worst = _check_pyramid_input(lambda q: loss(q, params), p, grad_p)
    for name, array in params.arrays().items():
        numeric = finite_diff_array(lambda a: loss(p, params.with_arrays({name: a})), array)
        worst = max(worst, relative_error(grads[name], numeric))
    return worst


def _max_abs(arrays) -> float:
    present = [np.asarray(a) for a in arrays if a is not None]
    return max((float(np.max(np.abs(a))) for a in present if a.size), default=0.0)


def check_zero_cotangent(rng: np.random.Generator) -> float:
    """Largest gradient magnitude produced by a zero cotangent; every VJP must return exact zeros."""
    x = Tensor.random((1, 2, 6, 6), rng)
    k = Conv2dKernel.create(rng.uniform(-1, 1, (2, 2, 3, 3)), rng.uniform(-1, 1, 2))
    zero = Tensor.zeros((1, 2, 6, 6))
    conv = conv2d_vjp(x, k, zero)
    deform = deform_conv2d_vjp(x, k, lattice_free_offsets(rng, (1, 18, 6, 6)), zero)
    arrays = [conv.grad_input.data, conv.grad_weights.data, conv.grad_bias,
              deform.grad_input.data, deform.grad_weights.data, deform.grad_offset.data, deform.grad_bias]

    p = FeaturePyramid.from_sizes(1, 2, 6, 6, 3, rng)
    layer = PConvLayer.init(2, 2, rng)
    sepc = randomize_predictors(SepcLayer.from_base(layer), rng)
    for grad_p, grads in (pconv_vjp(p, layer, p.zeros_like()), sepc_vjp(p, sepc, p.zeros_like())):
        arrays.extend(level.data for level in grad_p.levels)
        for grad in grads.values():
            arrays.extend((grad.weights, grad.bias))
    grad_p, bn_grads = bn_vjp(p, BNState.create(BNMode.INTEGRATED, 2, len(p)), p.zeros_like())
    arrays.extend(level.data for level in grad_p.levels)
    arrays.extend((bn_grads.gamma, bn_grads.beta))
    return _max_abs(arrays)


SUITES: Dict[str, tuple] = {
    "conv2d": (check_conv2d, LINEAR_TOLERANCE),
    "upsample": (check_upsample, LINEAR_TOLERANCE),
    "bilinear_sample": (check_bilinear_sample, NONLINEAR_TOLERANCE),
    "deform_conv2d": (check_deform_conv2d, NONLINEAR_TOLERANCE),
    "pconv": (check_pconv, LINEAR_TOLERANCE),
    "sepc": (check_sepc, NONLINEAR_TOLERANCE),
    "bn": (check_bn, NONLINEAR_TOLERANCE),
    "head": (check_head, NONLINEAR_TOLERANCE),
    "zero_cotangent": (check_zero_cotangent, 0.0),
}


def run_gradcheck_suites(seed: int = 0, suites: Optional[List[str]] = None) -> List[GradcheckResult]:
    """
    Run the named suites (all by default), each with its own seeded generator.

    Returns:
        List[GradcheckResult]: One result per suite, in SUITES order
    """
    names = list(SUITES) if suites is None else suites
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"Unknown gradcheck suite: {name}")
        check, tolerance = SUITES[name]
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        error = check(rng)
        result = GradcheckResult(name, error, tolerance)
        log = logger.info if result.passed else logger.error
        log(f"gradcheck {name}: max relative error {error:.3e} (tolerance {tolerance:.0e})")
        results.append(result)
    return results
