"""Feature pyramids and pyramid convolution (PConv).

Output level l of a PConv layer is

    y_l = w_same * x_l + fit(w_down *_s2 x_{l-1}) + fit(Upsample(w_up * x_{l+1}))

with the lower term dropped at the bottom level and the upper term dropped at
the top level. ``fit`` crops (or zero-extends) at the bottom/right so every
term matches level l exactly. Terms are always summed in the order same, down,
up.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Tuple

import numpy as np

from ..utils.logging import setup_logger
from .ops import (conv2d, conv2d_vjp, fit_spatial, fit_spatial_vjp, upsample_bilinear_x2,
                  upsample_bilinear_x2_vjp)
from .tensor import Conv2dKernel, ShapeError, Tensor

logger = setup_logger(__name__)


class EmptyPyramidError(ValueError):
    """Raised when an operation needs at least one pyramid level."""
    pass


class ChannelMismatchError(ShapeError):
    """Raised when pyramid levels or kernels disagree on the channel axis."""
    pass


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Ordered levels, bottom (largest) first, sharing batch and channel counts.

    Attributes:
        levels: Level tensors, level i has logical name P{min_level + i}
        min_level: Logical index of the bottom level
    """
    levels: Tuple[Tensor, ...]
    min_level: int = 3

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise EmptyPyramidError("A feature pyramid needs at least one level")
        n, c = levels[0].n, levels[0].c
        for i, level in enumerate(levels):
            if level.n != n:
                raise ShapeError(f"Shape mismatch on axis n: level {i} has {level.n}, bottom level has {n}")
            if level.c != c:
                raise ChannelMismatchError(f"Shape mismatch on axis c: level {i} has {level.c}, bottom level has {c}")
        for i in range(1, len(levels)):
            prev, cur = levels[i - 1], levels[i]
            if cur.h > prev.h or cur.w > prev.w or abs(2 * cur.h - prev.h) > 2 or abs(2 * cur.w - prev.w) > 2:
                raise ShapeError(
                    f"Level {i} is {cur.h}x{cur.w}, expected about half of level {i - 1} ({prev.h}x{prev.w})"
                )

    @classmethod
    def from_sizes(cls, n: int, c: int, base_h: int, base_w: int, levels: int,
                   rng: Optional[np.random.Generator] = None, min_level: int = 3) -> "FeaturePyramid":
        """Ceil-halving pyramid, uniform random on [-1, 1) when rng is given, zeros otherwise."""
        if levels < 1:
            raise EmptyPyramidError("A feature pyramid needs at least one level")
        tensors = []
        h, w = base_h, base_w
        for _ in range(levels):
            dims = (n, c, h, w)
            tensors.append(Tensor.random(dims, rng) if rng is not None else Tensor.zeros(dims))
            h, w = -(-h // 2), -(-w // 2)
        return cls(tuple(tensors), min_level)

    @property
    def n(self) -> int:
        return self.levels[0].n

    @property
    def c(self) -> int:
        return self.levels[0].c

    @property
    def sizes(self) -> List[Tuple[int, int]]:
        return [(level.h, level.w) for level in self.levels]

    @property
    def names(self) -> List[str]:
        return [f"P{self.min_level + i}" for i in range(len(self.levels))]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]

    def __iter__(self):
        return iter(self.levels)

    def with_levels(self, levels: Iterable[Tensor]) -> "FeaturePyramid":
        return FeaturePyramid(tuple(levels), self.min_level)

    def map(self, fn: Callable[[Tensor], Tensor]) -> "FeaturePyramid":
        return self.with_levels(fn(level) for level in self.levels)

    def __add__(self, other: "FeaturePyramid") -> "FeaturePyramid":
        if len(self) != len(other):
            raise ShapeError(f"Level count mismatch: {len(self)} != {len(other)}")
        return self.with_levels(a + b for a, b in zip(self.levels, other.levels))

    def __mul__(self, scalar: float) -> "FeaturePyramid":
        return self.map(lambda level: level * scalar)

    __rmul__ = __mul__

    def zeros_like(self) -> "FeaturePyramid":
        return self.map(lambda level: Tensor.zeros(level.dims))


@dataclass(frozen=True, eq=False)
class ParamGrad:
    """Gradient of one convolution kernel's weights and optional bias."""
    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        bias = None
        if self.bias is not None and other.bias is not None:
            bias = self.bias + other.bias
        return ParamGrad(self.weights + other.weights, bias)


Grads = Dict[str, ParamGrad]


def accumulate(total: Grads, extra: Mapping[str, ParamGrad]) -> Grads:
    """Add ``extra`` into ``total`` in place and return it."""
    for name, grad in extra.items():
        total[name] = total[name] + grad if name in total else grad
    return total


@dataclass(frozen=True, eq=False)
class PConvLayer:
    """The three kernels of a pyramid convolution.

    w_same runs at stride 1 on level l, w_down at stride 2 on level l-1 and w_up
    at stride 1 on level l+1 (followed by x2 upsampling). A layer without w_up
    and w_down has scale extent 1 and reduces to an ordinary per-level conv.
    """
    w_same: Conv2dKernel
    w_up: Optional[Conv2dKernel] = None
    w_down: Optional[Conv2dKernel] = None

    def __post_init__(self):
        if (self.w_up is None) != (self.w_down is None):
            raise ValueError("w_up and w_down must be given together")
        ref = self.w_same
        if ref.stride != 1:
            raise ValueError(f"w_same must have stride 1, got {ref.stride}")
        for name, k in (("w_up", self.w_up), ("w_down", self.w_down)):
            if k is None:
                continue
            if (k.c_out, k.c_in, k.k_h, k.k_w) != (ref.c_out, ref.c_in, ref.k_h, ref.k_w):
                raise ChannelMismatchError(
                    f"{name} has shape {(k.c_out, k.c_in, k.k_h, k.k_w)}, w_same has "
                    f"{(ref.c_out, ref.c_in, ref.k_h, ref.k_w)}"
                )
        if self.w_up is not None and self.w_up.stride != 1:
            raise ValueError(f"w_up must have stride 1, got {self.w_up.stride}")
        if self.w_down is not None and self.w_down.stride != 2:
            raise ValueError(f"w_down must have stride 2, got {self.w_down.stride}")

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3, extent: int = 3,
             bias: bool = False) -> "PConvLayer":
        """Fan-in scaled random kernels; extent 1 creates w_same only."""
        if extent not in (1, 3):
            raise ValueError(f"Scale extent must be 1 or 3, got {extent}")
        w_same = Conv2dKernel.kaiming(c_out, c_in, rng, k=k, bias=bias)
        if extent == 1:
            return cls(w_same)
        w_up = Conv2dKernel.kaiming(c_out, c_in, rng, k=k, bias=bias)
        w_down = Conv2dKernel.kaiming(c_out, c_in, rng, k=k, stride=2, bias=bias)
        return cls(w_same, w_up, w_down)

    @property
    def c_in(self) -> int:
        return self.w_same.c_in

    @property
    def c_out(self) -> int:
        return self.w_same.c_out

    @property
    def extent(self) -> int:
        return 1 if self.w_up is None else 3

    def parameters(self) -> Dict[str, Conv2dKernel]:
        return {name: k for name, k in (("w_same", self.w_same), ("w_up", self.w_up), ("w_down", self.w_down))
                if k is not None}

    def with_parameters(self, kernels: Mapping[str, Conv2dKernel]) -> "PConvLayer":
        merged = {**self.parameters(), **kernels}
        return PConvLayer(merged["w_same"], merged.get("w_up"), merged.get("w_down"))

    def forward(self, p: FeaturePyramid) -> FeaturePyramid:
        return pconv_forward(p, self)

    def vjp(self, p: FeaturePyramid, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, Grads]:
        return pconv_vjp(p, self, grad_out)


class PyramidLayer(Protocol):
    """Anything the head can stack: a PConv or a scale-equalizing PConv layer."""

    @property
    def c_in(self) -> int: ...

    def forward(self, p: FeaturePyramid) -> FeaturePyramid: ...

    def vjp(self, p: FeaturePyramid, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, Grads]: ...

    def parameters(self) -> Dict[str, Conv2dKernel]: ...

    def with_parameters(self, kernels: Mapping[str, Conv2dKernel]) -> "PyramidLayer": ...


Pullback = Callable[[Tensor], Tuple[Tensor, Grads]]
TermApply = Callable[[str, int, Tensor, Conv2dKernel], Tuple[Tensor, Pullback]]


def plain_term(name: str, source: int, x: Tensor, k: Conv2dKernel) -> Tuple[Tensor, Pullback]:
    """Apply k as an ordinary convolution."""
    out = conv2d(x, k)

    def pullback(grad: Tensor) -> Tuple[Tensor, Grads]:
        grads = conv2d_vjp(x, k, grad)
        return grads.grad_input, {name: ParamGrad(grads.grad_weights.data, grads.grad_bias)}

    return out, pullback


@dataclass(eq=False)
class _TermRecord:
    source: int
    pullback: Pullback
    conv_out: Tensor
    upsampled: bool


@dataclass(eq=False)
class PyramidTape:
    """Per output level, the terms recorded by run_pyramid_terms."""
    terms: List[List[_TermRecord]] = field(default_factory=list)


def run_pyramid_terms(p: FeaturePyramid, kernels: Mapping[str, Optional[Conv2dKernel]],
                      apply: TermApply = plain_term) -> Tuple[FeaturePyramid, PyramidTape]:
    """
    Evaluate the PConv dataflow with a pluggable per-term kernel application.

    Args:
        p (FeaturePyramid): Input pyramid
        kernels (Mapping[str, Optional[Conv2dKernel]]): w_same, and optionally w_down and w_up
        apply (TermApply): Applies a kernel to the term's input level and returns the
            output with its pullback

    Returns:
        Tuple[FeaturePyramid, PyramidTape]: Output pyramid and the recorded terms
    """
    w_same = kernels["w_same"]
    if p.c != w_same.c_in:
        raise ChannelMismatchError(f"Shape mismatch on axis c: pyramid has {p.c} channels, layer expects {w_same.c_in}")
    w_down, w_up = kernels.get("w_down"), kernels.get("w_up")
    count = len(p)
    tape = PyramidTape()
    outputs = []
    for l, x in enumerate(p.levels):
        out, pull = apply("w_same", l, x, w_same)
        records = [_TermRecord(l, pull, out, False)]
        tmp = out
        if l > 0 and w_down is not None:
            down, pull = apply("w_down", l - 1, p[l - 1], w_down)
            records.append(_TermRecord(l - 1, pull, down, False))
            tmp = tmp + fit_spatial(down, x.h, x.w)
        if l < count - 1 and w_up is not None:
            up, pull = apply("w_up", l + 1, p[l + 1], w_up)
            records.append(_TermRecord(l + 1, pull, up, True))
            tmp = tmp + fit_spatial(upsample_bilinear_x2(up), x.h, x.w)
        tape.terms.append(records)
        outputs.append(tmp)
    return p.with_levels(outputs), tape


def pull_pyramid_terms(p: FeaturePyramid, tape: PyramidTape, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, Grads]:
    """Reverse pass over a tape from run_pyramid_terms."""
    if grad_out.sizes != p.sizes or grad_out.n != p.n or len(grad_out) != len(tape.terms):
        raise ShapeError(f"grad_out sizes {grad_out.sizes} do not match the pyramid {p.sizes}")
    grad_levels = [np.zeros(level.dims) for level in p.levels]
    grads: Grads = {}
    for l, records in enumerate(tape.terms):
        g = grad_out[l]
        for record in records:
            conv_out = record.conv_out
            if record.upsampled:
                g_up = fit_spatial_vjp(2 * conv_out.h, 2 * conv_out.w, g)
                g_term = upsample_bilinear_x2_vjp(conv_out, g_up)
            else:
                g_term = fit_spatial_vjp(conv_out.h, conv_out.w, g)
            grad_input, term_grads = record.pullback(g_term)
            grad_levels[record.source] += grad_input.data
            accumulate(grads, term_grads)
    return p.with_levels(Tensor(g) for g in grad_levels), grads


def pconv_forward(p: FeaturePyramid, layer: PConvLayer) -> FeaturePyramid:
    """Pyramid convolution; per-level spatial dims and level count are preserved."""
    out, _ = run_pyramid_terms(p, layer.parameters())
    return out


def pconv_vjp(p: FeaturePyramid, layer: PConvLayer, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, Grads]:
    """
    Gradients of L = sum_l sum(grad_out_l * pconv_forward(p, layer)_l).

    Returns:
        Tuple[FeaturePyramid, Grads]: Input-pyramid gradient and kernel gradients keyed
            by w_same, w_up and w_down
    """
    _, tape = run_pyramid_terms(p, layer.parameters())
    return pull_pyramid_terms(p, tape, grad_out)

