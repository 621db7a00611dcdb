"""Gaussian scale space, Gaussian pyramids and the jumping action S_n.

The blur kernel is the Gauss-Weierstrass kernel exp(-|u|^2 / (4t)) (variance 2t
per axis), sampled on the integer grid, truncated at radius ceil(4 * sqrt(2t))
and normalized to sum 1. Borders are zero padded; every verification metric in
this module is computed on the interior only.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import correlate, correlate1d

from ..utils.logging import setup_logger
from .tensor import ShapeError, Tensor

logger = setup_logger(__name__)


class ScaleDomainError(ValueError):
    """Raised for scales or downsizing ratios outside their domain."""
    pass


class IndivisibleDimsError(ShapeError):
    """Raised when spatial dims are not divisible by the subsampling factor."""
    pass


@dataclass(frozen=True)
class GaussianPyramidSpec:
    """Initial scale s0 and level count; level l is downsized by 2^-l."""
    s0: float = 0.5
    levels: int = 3

    def __post_init__(self):
        if not self.s0 > 0:
            raise ScaleDomainError(f"s0 must be positive, got {self.s0}")
        if self.levels < 1:
            raise ScaleDomainError(f"A pyramid needs at least one level, got {self.levels}")


@dataclass(frozen=True, eq=False)
class GaussianKernel2D:
    """Normalized (2 * radius + 1)^2 sampled Gauss-Weierstrass kernel."""
    t: float
    radius: int
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class GaussianPyramid:
    """Levels p_0 .. p_{L-1}; level l has spatial dims (H / 2^l, W / 2^l)."""
    spec: GaussianPyramidSpec
    levels: Tuple[Tensor, ...]

    def __len__(self) -> int:
        return len(self.levels)


def scale_for_ratio(a: float, s0: float) -> float:
    """Blur scale t = s0 / a^2 - s0 that keeps the frequency limit after downsizing by a."""
    if not 0.0 < a <= 1.0:
        raise ScaleDomainError(f"Downsizing ratio must lie in (0, 1], got {a}")
    if not s0 > 0:
        raise ScaleDomainError(f"s0 must be positive, got {s0}")
    return s0 / (a * a) - s0


def blur_radius(t: float) -> int:
    """Truncation radius ceil(4 * sqrt(2t)), at least 1; 0 for the delta kernel."""
    if t < 0:
        raise ScaleDomainError(f"Scale must be non-negative, got {t}")
    if t == 0:
        return 0
    return max(1, math.ceil(4.0 * math.sqrt(2.0 * t)))


def _taps_1d(t: float, radius: int) -> np.ndarray:
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(u * u) / (4.0 * t))
    return taps / taps.sum()


def gaussian_kernel(t: float, radius: int) -> GaussianKernel2D:
    """
    Sampled, normalized 2-D Gauss-Weierstrass kernel.

    Args:
        t (float): Scale, t >= 0; t == 0 gives the discrete delta
        radius (int): Half width of the grid, >= 1 unless t == 0

    Returns:
        GaussianKernel2D: weights proportional to exp(-|u|^2 / (4t)), summing to 1

    Raises:
        ScaleDomainError: If t < 0 or radius < 1 with t > 0
    """
    if t < 0:
        raise ScaleDomainError(f"Scale must be non-negative, got {t}")
    if radius < 0 or (radius < 1 and t > 0):
        raise ScaleDomainError(f"Radius must be >= 1 for t > 0, got {radius}")
    size = 2 * radius + 1
    if t == 0:
        weights = np.zeros((size, size))
        weights[radius, radius] = 1.0
    else:
        u = np.arange(-radius, radius + 1, dtype=np.float64)
        sq = u[:, None] ** 2 + u[None, :] ** 2
        weights = np.exp(-sq / (4.0 * t))
        weights /= weights.sum()
    weights.setflags(write=False)
    return GaussianKernel2D(t=float(t), radius=int(radius), weights=weights)


def gaussian_blur(x: Tensor, t: float) -> Tensor:
    """Separable zero-padded Gaussian blur at scale t; same output dims."""
    radius = blur_radius(t)
    if radius == 0:
        return x
    taps = _taps_1d(t, radius)
    out = correlate1d(x.data, taps, axis=2, mode="constant", cval=0.0)
    out = correlate1d(out, taps, axis=3, mode="constant", cval=0.0)
    return Tensor(out)


def gaussian_blur_full(x: Tensor, t: float) -> Tensor:
    """Reference blur with the full 2-D kernel (slow path, used as an oracle)."""
    radius = blur_radius(t)
    if radius == 0:
        return x
    kernel = gaussian_kernel(t, radius).weights
    out = np.empty_like(x.data)
    for b in range(x.n):
        for ch in range(x.c):
            out[b, ch] = correlate(x.data[b, ch], kernel, mode="constant", cval=0.0)
    return Tensor(out)


def subsample(x: Tensor, factor: int) -> Tensor:
    """Keep every factor-th pixel starting at (0, 0)."""
    if factor == 1:
        return x
    return Tensor(x.data[:, :, ::factor, ::factor])


def crop_to_multiple(x: Tensor, multiple: int) -> Tensor:
    """Top-left anchored crop so both spatial dims are divisible by ``multiple``."""
    h = (x.h // multiple) * multiple
    w = (x.w // multiple) * multiple
    if h == 0 or w == 0:
        raise IndivisibleDimsError(f"{x.h}x{x.w} is smaller than the required multiple {multiple}")
    if (h, w) == (x.h, x.w):
        return x
    logger.debug(f"Cropping {x.h}x{x.w} to {h}x{w}")
    return Tensor(x.data[:, :, :h, :w])


def _require_divisible(x: Tensor, factor: int):
    if x.h % factor or x.w % factor:
        raise IndivisibleDimsError(f"Spatial dims {x.h}x{x.w} are not divisible by {factor}")


def jump(x: Tensor, n: int, s0: float) -> Tensor:
    """The jumping action S_n: blur with t(2^-n, s0), then subsample by 2^n."""
    if n < 0:
        raise ScaleDomainError(f"Jump distance must be >= 0, got {n}")
    factor = 2 ** n
    _require_divisible(x, factor)
    return subsample(gaussian_blur(x, scale_for_ratio(1.0 / factor, s0)), factor)


def build_gaussian_pyramid(x: Tensor, spec: GaussianPyramidSpec) -> GaussianPyramid:
    """
    Build p_0 .. p_{L-1} with p_l = S_l[x].

    Raises:
        IndivisibleDimsError: If the dims are not divisible by 2^(L-1); run
            crop_to_multiple first
    """
    _require_divisible(x, 2 ** (spec.levels - 1))
    levels = tuple(jump(x, level, spec.s0) for level in range(spec.levels))
    return GaussianPyramid(spec=spec, levels=levels)


def interior(x: Tensor, border: int) -> np.ndarray:
    """Spatial interior with ``border`` pixels removed on every side."""
    if border <= 0:
        return x.data
    return x.data[:, :, border:x.h - border, border:x.w - border]


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    """|a - b| / |b| (0 when both vanish)."""
    num = float(np.linalg.norm((a - b).ravel()))
    den = float(np.linalg.norm(b.ravel()))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def lemma1_border(m: int, n: int, s0: float) -> int:
    """Interior border for comparing S_m S_n with S_{m+n}, in output pixels."""
    direct = blur_radius(scale_for_ratio(2.0 ** -(m + n), s0)) / 2 ** (m + n)
    inner = blur_radius(scale_for_ratio(2.0 ** -n, s0)) / 2 ** n
    composed = (blur_radius(scale_for_ratio(2.0 ** -m, s0)) + inner) / 2 ** m
    return math.ceil(max(direct, composed)) + 1


def verify_lemma1(x: Tensor, m: int, n: int, s0: float) -> float:
    """
    Interior relative L2 discrepancy between S_m[S_n[x]] and S_{m+n}[x].

    Args:
        x (Tensor): Input image batch, dims divisible by 2^(m+n)
        m (int): Outer jump
        n (int): Inner jump
        s0 (float): Initial scale

    Returns:
        float: |S_m S_n x - S_{m+n} x| / |S_{m+n} x| over the interior

    Raises:
        IndivisibleDimsError: If the dims are not divisible by 2^(m+n)
    """
    if m < 0 or n < 0:
        raise ScaleDomainError(f"Jump distances must be >= 0, got m={m}, n={n}")
    _require_divisible(x, 2 ** (m + n))
    composed = jump(jump(x, n, s0), m, s0)
    direct = jump(x, m + n, s0)
    if m == 0 or n == 0:
        return relative_l2(composed.data, direct.data)
    border = lemma1_border(m, n, s0)
    if 2 * border >= min(direct.h, direct.w):
        raise ShapeError(
            f"Output {direct.h}x{direct.w} has no interior beyond a {border}-pixel border; use a larger input"
        )
    return relative_l2(interior(composed, border), interior(direct, border))


def blur_transfer_function(t: float, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discrete Fourier transform of the 2-D blur kernel on a size x size torus.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (|omega|^2 grid, real transfer function),
            comparable with exp(-t |omega|^2)
    """
    radius = blur_radius(t)
    kernel = gaussian_kernel(t, radius).weights
    if kernel.shape[0] > size:
        raise ShapeError(f"Kernel of width {kernel.shape[0]} does not fit a {size}x{size} grid")
    grid = np.zeros((size, size))
    k = kernel.shape[0]
    grid[:k, :k] = kernel
    grid = np.roll(grid, (-radius, -radius), axis=(0, 1))
    transfer = np.fft.fft2(grid).real
    omega = 2.0 * np.pi * np.fft.fftfreq(size)
    omega_sq = omega[:, None] ** 2 + omega[None, :] ** 2
    return omega_sq, transfer


def band_limited_noise(dims, rng: np.random.Generator, pre_blur: float = 2.0) -> Tensor:
    """Zero-mean uniform noise on [-1, 1) blurred at scale ``pre_blur``."""
    return gaussian_blur(Tensor.random(dims, rng), pre_blur)


def semigroup_error(x: Tensor, t1: float, t2: float) -> float:
    """Interior max abs difference between blur(blur(x, t1), t2) and blur(x, t1 + t2)."""
    border = blur_radius(t1) + blur_radius(t2) + blur_radius(t1 + t2)
    if 2 * border >= min(x.h, x.w):
        raise ShapeError(f"Input {x.h}x{x.w} has no interior beyond a {border}-pixel border")
    twice = gaussian_blur(gaussian_blur(x, t1), t2)
    once = gaussian_blur(x, t1 + t2)
    return float(np.max(np.abs(interior(twice, border) - interior(once, border))))


def jump_composition_error(x: Tensor, s0: float) -> float:
    """Interior max abs difference between jump(jump(x, 1), 1) and jump(x, 2)."""
    border = lemma1_border(1, 1, s0)
    twice = jump(jump(x, 1, s0), 1, s0)
    once = jump(x, 2, s0)
    return float(np.max(np.abs(interior(twice, border) - interior(once, border))))
