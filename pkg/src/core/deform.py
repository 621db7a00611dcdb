"""Deformable 2-D convolution with bilinear kernel sampling.

Offsets are a tensor of dims (n, 2 * k_h * k_w, H_out, W_out): channel 2i holds
the y offset and channel 2i + 1 the x offset of kernel point i (row-major over
the kernel grid), in input pixels. Corners of a sample that fall outside the
map contribute zero.
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ..utils.logging import setup_logger
from ..utils.monitoring import timed_op
from .ops import conv_output_hw
from .tensor import Conv2dKernel, ShapeError, Tensor

logger = setup_logger(__name__)

OffsetField = Tensor


class OffsetShapeError(ShapeError):
    """Raised when an offset field does not match the convolution output grid."""
    pass


@dataclass(frozen=True, eq=False)
class SampleGrad:
    """Gradients of one bilinear sample."""
    grad_y: float
    grad_x: float
    grad_input: Tensor


@dataclass(frozen=True, eq=False)
class DeformGrads:
    """Reverse-mode gradients of a deformable convolution."""
    grad_input: Tensor
    grad_weights: Tensor
    grad_offset: Tensor
    grad_bias: Optional[np.ndarray] = None


class _Corner(NamedTuple):
    y: np.ndarray
    x: np.ndarray
    weight: np.ndarray
    d_weight_dy: np.ndarray
    d_weight_dx: np.ndarray


def _corners(y, x) -> List[_Corner]:
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = y - y0
    fx = x - x0
    gy = 1.0 - fy
    gx = 1.0 - fx
    y0 = np.asarray(y0).astype(np.int64)
    x0 = np.asarray(x0).astype(np.int64)
    return [
        _Corner(y0, x0, gy * gx, -gx, -gy),
        _Corner(y0, x0 + 1, gy * fx, -fx, gy),
        _Corner(y0 + 1, x0, fy * gx, gx, -fy),
        _Corner(y0 + 1, x0 + 1, fy * fx, fx, fy),
    ]


def offset_channels(k: Conv2dKernel) -> int:
    return 2 * k.k_h * k.k_w


def zero_offsets(x: Tensor, k: Conv2dKernel) -> OffsetField:
    h_out, w_out = conv_output_hw(x, k)
    return Tensor.zeros((x.n, offset_channels(k), h_out, w_out))


def uniform_offsets(x: Tensor, k: Conv2dKernel, dy: float, dx: float) -> OffsetField:
    """Same (dy, dx) displacement for every kernel point and output location."""
    h_out, w_out = conv_output_hw(x, k)
    data = np.empty((x.n, offset_channels(k), h_out, w_out))
    data[:, 0::2] = dy
    data[:, 1::2] = dx
    return Tensor(data)


def bilinear_sample(x: Tensor, n: int, c: int, y: float, xc: float) -> float:
    """Bilinear value of channel c of batch element n at real coordinate (y, xc)."""
    total = 0.0
    for corner in _corners(y, xc):
        yi, xi = int(corner.y), int(corner.x)
        if 0 <= yi < x.h and 0 <= xi < x.w:
            total += float(corner.weight) * float(x.data[n, c, yi, xi])
    return total


def bilinear_sample_vjp(x: Tensor, n: int, c: int, y: float, xc: float, grad_out: float = 1.0) -> SampleGrad:
    """
    Gradients of grad_out * bilinear_sample(x, n, c, y, xc).

    Returns:
        SampleGrad: derivatives with respect to y, xc and the sampled map; at integer
            coordinates the one-sided derivative from above is returned
    """
    grad_map = np.zeros(x.dims)
    grad_y = 0.0
    grad_x = 0.0
    for corner in _corners(y, xc):
        yi, xi = int(corner.y), int(corner.x)
        if 0 <= yi < x.h and 0 <= xi < x.w:
            value = float(x.data[n, c, yi, xi])
            grad_y += grad_out * float(corner.d_weight_dy) * value
            grad_x += grad_out * float(corner.d_weight_dx) * value
            grad_map[n, c, yi, xi] += grad_out * float(corner.weight)
    return SampleGrad(grad_y=grad_y, grad_x=grad_x, grad_input=Tensor(grad_map))


def _check_offsets(x: Tensor, k: Conv2dKernel, off: OffsetField, h_out: int, w_out: int):
    expected = (x.n, offset_channels(k), h_out, w_out)
    if off.dims != expected:
        raise OffsetShapeError(f"Offset field has dims {off.dims}, expected {expected}")


def _sampling_plan(x: Tensor, k: Conv2dKernel, off: OffsetField, h_out: int, w_out: int):
    base_y = (np.arange(h_out) * k.stride - k.padding).astype(np.float64)[None, :, None]
    base_x = (np.arange(w_out) * k.stride - k.padding).astype(np.float64)[None, None, :]
    plan = []
    for ki in range(k.k_h):
        for kj in range(k.k_w):
            point = ki * k.k_w + kj
            y = base_y + ki + off.data[:, 2 * point]
            xc = base_x + kj + off.data[:, 2 * point + 1]
            corners = []
            for corner in _corners(y, xc):
                valid = (corner.y >= 0) & (corner.y < x.h) & (corner.x >= 0) & (corner.x < x.w)
                yc = np.clip(corner.y, 0, x.h - 1)
                xcl = np.clip(corner.x, 0, x.w - 1)
                corners.append((corner, valid, yc, xcl))
            plan.append(corners)
    return plan


def _gather(plane: np.ndarray, batch: np.ndarray, corners) -> Tuple[np.ndarray, List[np.ndarray]]:
    values = [np.where(valid, plane[batch, yc, xc], 0.0) for _, valid, yc, xc in corners]
    sampled = corners[0][0].weight * values[0]
    for (corner, _, _, _), value in zip(corners[1:], values[1:]):
        sampled = sampled + corner.weight * value
    return sampled, values


def deform_conv2d(x: Tensor, k: Conv2dKernel, off: OffsetField) -> Tensor:
    """Deformable convolution; with zero offsets it equals conv2d(x, k) bitwise.

    Raises:
        ShapeError: On channel mismatch
        OffsetShapeError: If off does not match the output grid
    """
    h_out, w_out = conv_output_hw(x, k)
    _check_offsets(x, k, off, h_out, w_out)
    plan = _sampling_plan(x, k, off, h_out, w_out)
    batch = np.arange(x.n)[:, None, None]
    weights = k.weights.data
    out = np.zeros((x.n, k.c_out, h_out, w_out))
    macs = x.n * k.c_out * h_out * w_out * k.c_in * k.k_h * k.k_w
    with timed_op("deform_conv2d", macs):
        for ci in range(k.c_in):
            plane = x.data[:, ci]
            for ki in range(k.k_h):
                for kj in range(k.k_w):
                    sampled, _ = _gather(plane, batch, plan[ki * k.k_w + kj])
                    out += weights[:, ci, ki, kj][None, :, None, None] * sampled[:, None, :, :]
        if k.bias is not None:
            out += k.bias[None, :, None, None]
    return Tensor(out)


def deform_conv2d_vjp(x: Tensor, k: Conv2dKernel, off: OffsetField, grad_out: Tensor) -> DeformGrads:
    """
    Gradients of L = sum(grad_out * deform_conv2d(x, k, off)).

    Args:
        x (Tensor): Input (n, c_in, H, W)
        k (Conv2dKernel): Kernel
        off (OffsetField): Offsets (n, 2 * k_h * k_w, H_out, W_out)
        grad_out (Tensor): Upstream gradient with the output dims

    Returns:
        DeformGrads: gradients for the input, weights, offsets and bias
    """
    h_out, w_out = conv_output_hw(x, k)
    _check_offsets(x, k, off, h_out, w_out)
    expected = (x.n, k.c_out, h_out, w_out)
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out has dims {grad_out.dims}, deform_conv2d output is {expected}")
    plan = _sampling_plan(x, k, off, h_out, w_out)
    batch = np.arange(x.n)[:, None, None]
    batch_full = np.broadcast_to(batch, (x.n, h_out, w_out))
    g = grad_out.data
    weights = k.weights.data
    grad_x = np.zeros(x.dims)
    grad_w = np.zeros_like(weights)
    grad_off = np.zeros(off.dims)
    for ci in range(k.c_in):
        plane = x.data[:, ci]
        grad_plane = grad_x[:, ci]
        for ki in range(k.k_h):
            for kj in range(k.k_w):
                point = ki * k.k_w + kj
                corners = plan[point]
                sampled, values = _gather(plane, batch, corners)
                grad_w[:, ci, ki, kj] = np.einsum("nohw,nhw->o", g, sampled)
                grad_sampled = np.einsum("o,nohw->nhw", weights[:, ci, ki, kj], g)
                for (corner, valid, yc, xc), value in zip(corners, values):
                    np.add.at(grad_plane, (batch_full, yc, xc), grad_sampled * corner.weight * valid)
                    grad_off[:, 2 * point] += grad_sampled * corner.d_weight_dy * value
                    grad_off[:, 2 * point + 1] += grad_sampled * corner.d_weight_dx * value
    grad_b = g.sum(axis=(0, 2, 3)) if k.bias is not None else None
    return DeformGrads(Tensor(grad_x), Tensor(grad_w), Tensor(grad_off), grad_b)
