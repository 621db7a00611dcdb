"""Analytical head cost model, pyramid correlation and the equivariance metric.

Costs are multiply-accumulate pairs (MACs). Relative costs are expressed in
units of one plain KxK convolution applied to every pyramid level.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.logging import setup_logger
from .config import CostModelInput, HeadConfig, SepcVariant, SizeMode
from .ops import fit_spatial, upsample_bilinear_x2
from .pyramid import FeaturePyramid, PConvLayer, pconv_forward
from .scale_space import (GaussianPyramid, GaussianPyramidSpec, blur_radius, band_limited_noise,
                          build_gaussian_pyramid, interior, jump, relative_l2, scale_for_ratio)
from .tensor import Conv2dKernel, ShapeError, Tensor

logger = setup_logger(__name__)

UPSAMPLE_MACS_PER_ELEMENT = 7
BILINEAR_MACS_PER_POINT = 8


class InsufficientLevelsError(ValueError):
    """Raised when a pyramid has too few levels for the requested comparison."""
    pass


def flops_conv2d(c_in: float, k_h: float, k_w: float, h: float, w: float, c_out: float) -> float:
    """MACs of a convolution producing an h x w map: C_in * K_h * K_w * H * W * C_out."""
    return c_in * k_h * k_w * h * w * c_out


def deform_overhead_factor(k_h: float, k_w: float, c_out: float) -> float:
    """(8 + 2 * K_h * K_w) / C_out: bilinear sampling and offset prediction per conv MAC."""
    if c_out < 1:
        raise ValueError(f"c_out must be >= 1, got {c_out}")
    return (BILINEAR_MACS_PER_POINT + 2 * k_h * k_w) / c_out


def flops_deform_conv2d(c_in: float, k_h: float, k_w: float, h: float, w: float, c_out: float) -> float:
    """Approximate MACs of a deformable convolution, offset predictor included."""
    return (1.0 + deform_overhead_factor(k_h, k_w, c_out)) * flops_conv2d(c_in, k_h, k_w, h, w, c_out)


def level_sizes(inp: CostModelInput) -> List[Tuple[float, float]]:
    """H_img / stride per level; exact reals in fractional mode, ceil'd integers in ceil mode."""
    sizes = []
    for stride in inp.strides:
        h, w = inp.img_height / stride, inp.img_width / stride
        if inp.size_mode == SizeMode.CEIL:
            h, w = math.ceil(h), math.ceil(w)
        sizes.append((h, w))
    return sizes


def pyramid_area_ratios(inp: CostModelInput) -> List[float]:
    """r_l = A_l / sum_j A_j, bottom level first."""
    areas = [h * w for h, w in level_sizes(inp)]
    total = sum(areas)
    return [a / total for a in areas]


def boundary_factors(levels: int, up_ratio: float = 0.25) -> List[float]:
    """c_l for an exactly halving pyramid: 1 + 0.25 at the bottom, 2 at the top, 2.25 between."""
    if levels == 1:
        return [1.0]
    return [1.0 + (1.0 if l > 0 else 0.0) + (up_ratio if l < levels - 1 else 0.0) for l in range(levels)]


def pconv_cost_total(ratios: Sequence[float], factors: Optional[Sequence[float]] = None) -> float:
    """C_total = sum_l c_l * r_l; factors default to boundary_factors(len(ratios))."""
    factors = boundary_factors(len(ratios)) if factors is None else factors
    if len(factors) != len(ratios):
        raise ValueError(f"{len(factors)} factors for {len(ratios)} levels")
    return float(sum(c * r for c, r in zip(factors, ratios)))


def pconv_cost_factors(inp: CostModelInput) -> Tuple[List[float], float]:
    """
    Per-level PConv cost factors and their area-weighted total.

    The same term costs 1, the stride-2 down term costs 1 (its output has level l's
    size) and the up term costs 0.25 (its conv runs on the half-size level above).
    The factors are fixed per position in the pyramid; only the area ratios follow
    size_mode. With include_upsample every level with an up term also pays 7 MACs
    per upsampled element.

    Returns:
        Tuple[List[float], float]: (c_l bottom level first, C_total)
    """
    ratios = pyramid_area_ratios(inp)
    count = len(ratios)
    factors = boundary_factors(count)
    if inp.include_upsample:
        upsample = UPSAMPLE_MACS_PER_ELEMENT / (inp.channels * inp.kernel_h * inp.kernel_w)
        factors = [c + upsample if l < count - 1 else c for l, c in enumerate(factors)]
    return factors, pconv_cost_total(ratios, factors)


def sepc_overhead(inp: CostModelInput, extent: int) -> float:
    """
    Extra cost of one SEPC layer over its plain counterpart, in plain-conv units.

    Every term whose input is above the bottom level pays deform_overhead_factor on
    its output area: same terms on levels >= 1, down terms on levels >= 2 and every
    up term (its conv runs on level l + 1).
    """
    ratios = pyramid_area_ratios(inp)
    factor = deform_overhead_factor(inp.kernel_h, inp.kernel_w, inp.channels)
    deformed = sum(ratios[1:])
    if extent == 3:
        deformed += sum(ratios[2:])
        deformed += sum(ratios[l + 1] for l in range(len(ratios) - 1))
    return deformed * factor


def head_flops_ratio(cfg: HeadConfig, inp: CostModelInput) -> float:
    """
    MACs of the configured head relative to a baseline of 2 x cfg.stacks plain convs.

    Output convolutions are identical in both heads and excluded.
    """
    _, c_total = pconv_cost_factors(inp)
    stack_cost = c_total if cfg.scale_kernel == 3 else 1.0
    stack_branches = 1 if cfg.combined else 2
    stack_layers = stack_branches * cfg.stacks
    extra_layers = 2 if cfg.extra_conv else 0
    units = stack_layers * stack_cost + extra_layers
    variant = SepcVariant(cfg.sepc_variant)
    if variant in (SepcVariant.LITE, SepcVariant.FULL):
        units += extra_layers * sepc_overhead(inp, extent=1)
    if variant == SepcVariant.FULL:
        units += stack_layers * sepc_overhead(inp, extent=cfg.scale_kernel)
    return units / (2 * cfg.stacks)


@dataclass(frozen=True)
class LevelCost:
    name: str
    h: float
    w: float
    r: float
    c: float
    macs: float


@dataclass(frozen=True)
class FlopsReport:
    """Per-level costs of one PConv layer plus head-level aggregates."""
    levels: Tuple[LevelCost, ...]
    c_total: float
    head_ratio: float
    sepc_overheads: Dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["level,H,W,r,c,macs"]
        for lc in self.levels:
            rows.append(f"{lc.name},{lc.h:.6g},{lc.w:.6g},{lc.r:.6g},{lc.c:.6g},{lc.macs:.6g}")
        rows.append(f"C_total,{self.c_total:.6g}")
        rows.append(f"head_ratio,{self.head_ratio:.6g}")
        return "\n".join(rows) + "\n"


def flops_report(inp: CostModelInput, cfg: HeadConfig) -> FlopsReport:
    """
    Build the cost report for inp and the head described by cfg.

    sepc_overheads holds, per variant, the head ratio increase over variant none.
    """
    sizes = level_sizes(inp)
    ratios = pyramid_area_ratios(inp)
    factors, c_total = pconv_cost_factors(inp)
    if cfg.scale_kernel == 1:
        factors = [1.0] * len(factors)
        c_total = 1.0
    levels = tuple(
        LevelCost(name, h, w, r, c, c * flops_conv2d(inp.channels, inp.kernel_h, inp.kernel_w, h, w, inp.channels))
        for name, (h, w), r, c in zip(inp.level_names, sizes, ratios, factors)
    )
    base = head_flops_ratio(cfg.model_copy(update={"sepc_variant": SepcVariant.NONE}), inp)
    overheads = {
        variant.value: head_flops_ratio(cfg.model_copy(update={"sepc_variant": variant}), inp) - base
        for variant in SepcVariant
    }
    return FlopsReport(levels, c_total, head_flops_ratio(cfg, inp), overheads)


@dataclass(frozen=True, eq=False)
class CorrelationReport:
    """L x L correlation matrix and the levels that were constant for some batch item."""
    matrix: np.ndarray
    constant_levels: Tuple[int, ...] = ()

    def to_csv(self) -> str:
        count = self.matrix.shape[0]
        rows = ["level," + ",".join(str(j) for j in range(count))]
        for i in range(count):
            rows.append(f"{i}," + ",".join(f"{v:.6g}" for v in self.matrix[i]))
        if self.constant_levels:
            rows.append("constant_levels," + ";".join(str(l) for l in self.constant_levels))
        return "\n".join(rows) + "\n"


def _resize_to_bottom(level: Tensor, index: int, h: int, w: int) -> Tensor:
    for _ in range(index):
        level = upsample_bilinear_x2(level)
    return fit_spatial(level, h, w)


def correlation_matrix(p: FeaturePyramid) -> CorrelationReport:
    """
    Pearson correlation between pyramid levels, averaged over the batch.

    Every level is upsampled to the bottom size (top-left crop on overshoot) and
    flattened over (c, h, w). A constant level correlates 0 with every other level
    and is listed in constant_levels. The diagonal is exactly 1.

    Raises:
        InsufficientLevelsError: If the pyramid has fewer than 2 levels
    """
    count = len(p)
    if count < 2:
        raise InsufficientLevelsError(f"Correlation needs at least 2 levels, got {count}")
    h, w = p.sizes[0]
    flat = np.stack([_resize_to_bottom(level, l, h, w).data.reshape(p.n, -1) for l, level in enumerate(p.levels)])
    centered = flat - flat.mean(axis=2, keepdims=True)
    norms = np.linalg.norm(centered, axis=2)
    constant = tuple(int(l) for l in range(count) if np.any(norms[l] == 0.0))
    matrix = np.eye(count)
    for i in range(count):
        for j in range(i + 1, count):
            values = []
            for b in range(p.n):
                denom = norms[i, b] * norms[j, b]
                values.append(0.0 if denom == 0.0 else float(centered[i, b] @ centered[j, b]) / denom)
            matrix[i, j] = matrix[j, i] = float(np.clip(np.mean(values), -1.0, 1.0))
    if constant:
        logger.warning(f"Constant pyramid levels {list(constant)} have zero correlation with every other level")
    return CorrelationReport(matrix, constant)


def shuffled_control(levels: Sequence[Tensor], rng: np.random.Generator) -> List[Tensor]:
    """Each level with its pixel positions randomly permuted (same permutation for all n, c)."""
    out = []
    for level in levels:
        flat = level.data.reshape(level.n, level.c, -1)
        perm = rng.permutation(flat.shape[2])
        out.append(Tensor(flat[:, :, perm].reshape(level.dims)))
    return out


def averaging_layer(channels: int = 1, k: int = 3) -> PConvLayer:
    """PConv layer whose three kernels all average a k x k x channels window."""
    weights = np.full((channels, channels, k, k), 1.0 / (k * k * channels))
    return PConvLayer(
        w_same=Conv2dKernel.create(weights),
        w_up=Conv2dKernel.create(weights),
        w_down=Conv2dKernel.create(weights, stride=2),
    )


def _pconv_reach(reach: Sequence[float], kr: int) -> List[int]:
    count = len(reach)
    out = []
    for l in range(count):
        r = reach[l] + kr
        if l > 0:
            r = max(r, math.ceil(reach[l - 1] / 2) + kr + 1)
        if l < count - 1:
            r = max(r, 2 * (reach[l + 1] + kr) + 2)
        out.append(int(r))
    return out


def equivariance_borders(levels: int, m: int, s0: float, kr: int) -> List[int]:
    """
    Interior borders for comparing PConv(jumped pyramid)[l] with PConv(pyramid)[l + m].

    Reach widths (pixels touched by zero padding) are propagated through the
    Gaussian levels, the jump, and the PConv terms; entry l is the larger of the
    two paths, in level-l pixels of the jumped pyramid.
    """
    gaussian = [math.ceil(blur_radius(scale_for_ratio(2.0 ** -j, s0)) / 2 ** j) + 1 for j in range(levels)]
    jump_r = blur_radius(scale_for_ratio(2.0 ** -m, s0))
    jumped = [math.ceil((gaussian[j] + jump_r) / 2 ** m) + 1 for j in range(levels - m)]
    direct = _pconv_reach(gaussian, kr)
    shifted = _pconv_reach(jumped, kr)
    return [max(shifted[l], direct[l + m]) for l in range(levels - m)]


PyramidLike = Union[GaussianPyramid, FeaturePyramid, Sequence[Tensor]]


def _levels_of(p: PyramidLike) -> List[Tensor]:
    return list(p.levels) if isinstance(p, (GaussianPyramid, FeaturePyramid)) else list(p)


def equivariance_error(p: PyramidLike, layer: PConvLayer, m: int, s0: float) -> float:
    """
    Mean interior relative L2 difference between PConv of the m-jumped pyramid
    [S_m p_0, ..., S_m p_{L-m-1}] at level l and level l + m of PConv(p), over l >= 1.

    Args:
        p (PyramidLike): Pyramid levels p_0 .. p_{L-1} with exactly halving dims
        layer (PConvLayer): Plain PConv layer
        m (int): Level shift
        s0 (float): Initial scale of the jump

    Raises:
        InsufficientLevelsError: If the pyramid has fewer than m + 2 levels
    """
    levels = _levels_of(p)
    if m < 0:
        raise ValueError(f"Level shift must be >= 0, got {m}")
    if m == 0:
        return 0.0
    count = len(levels)
    if count < m + 2:
        raise InsufficientLevelsError(f"Shift {m} needs at least {m + 2} levels, got {count}")
    full = pconv_forward(FeaturePyramid(tuple(levels)), layer)
    shifted_input = FeaturePyramid(tuple(jump(levels[j], m, s0) for j in range(count - m)))
    shifted = pconv_forward(shifted_input, layer)
    kr = max(layer.w_same.k_h, layer.w_same.k_w) // 2
    borders = equivariance_borders(count, m, s0, kr)
    errors = []
    for l in range(1, count - m):
        border = borders[l]
        a, b = shifted[l], full[l + m]
        if 2 * border >= min(a.h, a.w):
            raise ShapeError(f"Level {l} ({a.h}x{a.w}) has no interior beyond a {border}-pixel border; "
                             f"use a larger base size")
        errors.append(relative_l2(interior(a, border), interior(b, border)))
    return float(np.mean(errors))


@dataclass(frozen=True)
class EquivarianceReport:
    gaussian: float
    control: float

    @property
    def separation(self) -> float:
        return math.inf if self.gaussian == 0.0 else self.control / self.gaussian


def equivariance_suite(seed: int = 0, size: int = 256, levels: int = 4, m: int = 1, s0: float = 0.5,
                       pre_blur: float = 2.0, constant: Optional[float] = None) -> EquivarianceReport:
    """
    Equivariance error on a Gaussian pyramid and on its level-shuffled control.

    The pyramid is built from band-limited noise, or from a constant image when
    ``constant`` is given.
    """
    rng = np.random.default_rng(seed)
    if constant is None:
        x = band_limited_noise((1, 1, size, size), rng, pre_blur)
    else:
        x = Tensor.full((1, 1, size, size), constant)
    pyramid = build_gaussian_pyramid(x, GaussianPyramidSpec(s0=s0, levels=levels))
    layer = averaging_layer()
    gaussian = equivariance_error(pyramid, layer, m, s0)
    control = equivariance_error(shuffled_control(pyramid.levels, rng), layer, m, s0)
    logger.info(f"Equivariance error: gaussian={gaussian:.6g}, control={control:.6g}")
    return EquivarianceReport(gaussian, control)
