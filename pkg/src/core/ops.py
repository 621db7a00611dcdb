"""Convolution, upsampling and their reverse-mode derivatives.

All kernels work on double precision (n, c, h, w) tensors. ``conv2d`` accumulates
every output element in a fixed order (input channel outer, kernel row-major
inner, bias last) so results are bit-reproducible and equal to a naive
quadruple loop with the same order.
"""

from typing import Tuple

import numpy as np

from ..utils.logging import setup_logger
from ..utils.monitoring import timed_op
from .tensor import Conv2dKernel, DegenerateOutputError, GradTriple, ShapeError, Tensor

logger = setup_logger(__name__)


def _pad(data: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_hw(x: Tensor, k: Conv2dKernel) -> Tuple[int, int]:
    """Validate (x, k) and return the output spatial size."""
    if x.c != k.c_in:
        raise ShapeError(f"Shape mismatch on axis c: input has {x.c} channels, kernel expects {k.c_in}")
    h_out, w_out = k.output_hw(x.h, x.w)
    if h_out < 1 or w_out < 1:
        raise DegenerateOutputError(
            f"Degenerate output {h_out}x{w_out} for input {x.h}x{x.w}, "
            f"kernel {k.k_h}x{k.k_w}, stride {k.stride}, padding {k.padding}"
        )
    return h_out, w_out


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(x: Tensor, k: Conv2dKernel) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Args:
        x: Input (n, c_in, H, W)
        k: Kernel with c_in matching x

    Returns:
        Tensor: (n, c_out, H_out, W_out)

    Raises:
        ShapeError: If the channel axis does not match
        DegenerateOutputError: If H_out or W_out < 1
    """
    h_out, w_out = conv_output_hw(x, k)
    n = x.n
    xp = _pad(x.data, k.padding)
    weights = k.weights.data
    out = np.zeros((n, k.c_out, h_out, w_out))
    macs = n * k.c_out * h_out * w_out * k.c_in * k.k_h * k.k_w
    with timed_op("conv2d", macs):
        for ci in range(k.c_in):
            for ki in range(k.k_h):
                rows = _window(ki, h_out, k.stride)
                for kj in range(k.k_w):
                    cols = _window(kj, w_out, k.stride)
                    patch = xp[:, ci, rows, cols]
                    out += weights[:, ci, ki, kj][None, :, None, None] * patch[:, None, :, :]
        if k.bias is not None:
            out += k.bias[None, :, None, None]
    return Tensor(out)


def conv2d_vjp(x: Tensor, k: Conv2dKernel, grad_out: Tensor) -> GradTriple:
    """Gradients of L = sum(grad_out * conv2d(x, k)) with respect to x, weights and bias."""
    h_out, w_out = conv_output_hw(x, k)
    expected = (x.n, k.c_out, h_out, w_out)
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out has dims {grad_out.dims}, conv2d output is {expected}")
    g = grad_out.data
    xp = _pad(x.data, k.padding)
    weights = k.weights.data
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weights)
    for ci in range(k.c_in):
        for ki in range(k.k_h):
            rows = _window(ki, h_out, k.stride)
            for kj in range(k.k_w):
                cols = _window(kj, w_out, k.stride)
                grad_w[:, ci, ki, kj] = np.einsum("nohw,nhw->o", g, xp[:, ci, rows, cols])
                grad_xp[:, ci, rows, cols] += np.einsum("o,nohw->nhw", weights[:, ci, ki, kj], g)
    p = k.padding
    grad_x = grad_xp[:, :, p:p + x.h, p:p + x.w]
    grad_b = g.sum(axis=(0, 2, 3)) if k.bias is not None else None
    return GradTriple(Tensor(grad_x), Tensor(grad_w), grad_b)


def _upsample_taps(size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centers: output o samples input (o + 0.5) / 2 - 0.5, clamped.
    src = np.clip((np.arange(2 * size) + 0.5) / 2.0 - 0.5, 0.0, size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, src - i0


def _interpolation_matrix(size: int) -> np.ndarray:
    i0, i1, frac = _upsample_taps(size)
    m = np.zeros((2 * size, size))
    rows = np.arange(2 * size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear_x2(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centers and edge clamping."""
    if x.h < 1 or x.w < 1:
        raise DegenerateOutputError(f"Cannot upsample an empty {x.h}x{x.w} map")
    i0, i1, fh = _upsample_taps(x.h)
    j0, j1, fw = _upsample_taps(x.w)
    d = x.data
    # a + f * (b - a) keeps constants exact and stays inside [min, max].
    top, bottom = d[:, :, i0, :], d[:, :, i1, :]
    rows = top + fh[None, None, :, None] * (bottom - top)
    left, right = rows[:, :, :, j0], rows[:, :, :, j1]
    return Tensor(left + fw[None, None, None, :] * (right - left))


def upsample_bilinear_x2_vjp(x: Tensor, grad_out: Tensor) -> Tensor:
    """Gradient of sum(grad_out * upsample_bilinear_x2(x)) with respect to x."""
    expected = (x.n, x.c, 2 * x.h, 2 * x.w)
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out has dims {grad_out.dims}, upsample output is {expected}")
    mh = _interpolation_matrix(x.h)
    mw = _interpolation_matrix(x.w)
    grad = np.einsum("ncHW,Hh,Ww->nchw", grad_out.data, mh, mw, optimize=True)
    return Tensor(grad)


def fit_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Crop or zero-extend at the bottom/right so the map is exactly h x w."""
    if (x.h, x.w) == (h, w):
        return x
    out = np.zeros((x.n, x.c, h, w))
    hh, ww = min(h, x.h), min(w, x.w)
    out[:, :, :hh, :ww] = x.data[:, :, :hh, :ww]
    return Tensor(out)


def fit_spatial_vjp(h: int, w: int, grad_out: Tensor) -> Tensor:
    """Gradient of fit_spatial for an input of spatial size h x w."""
    return fit_spatial(grad_out, h, w)


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def relu_vjp(x: Tensor, grad_out: Tensor) -> Tensor:
    return Tensor(np.where(x.data > 0.0, grad_out.data, 0.0))
