"""Dense rank-4 tensor value type and convolution kernel parameters."""

from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

import numpy as np

from ..utils.logging import setup_logger

logger = setup_logger(__name__)

Dims = Tuple[int, int, int, int]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""
    pass


class DegenerateOutputError(ShapeError):
    """Raised when an operation would produce an empty spatial output."""
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable (n, c, h, w) array of doubles, row-major."""
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must have rank 4 (n, c, h, w), got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, dims: Iterable[int]) -> "Tensor":
        return cls(np.zeros(tuple(dims)))

    @classmethod
    def full(cls, dims: Iterable[int], value: float) -> "Tensor":
        return cls(np.full(tuple(dims), float(value)))

    @classmethod
    def random(cls, dims: Iterable[int], rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> "Tensor":
        return cls(rng.uniform(low, high, size=tuple(dims)))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    @property
    def n(self) -> int:
        return self.dims[0]

    @property
    def c(self) -> int:
        return self.dims[1]

    @property
    def h(self) -> int:
        return self.dims[2]

    @property
    def w(self) -> int:
        return self.dims[3]

    @property
    def size(self) -> int:
        return int(self.data.size)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def numpy(self) -> np.ndarray:
        """Writable copy of the data."""
        return self.data.copy()

    def __add__(self, other: "Tensor") -> "Tensor":
        _require_same_dims(self, other)
        return Tensor(self.data + other.data)

    def __sub__(self, other: "Tensor") -> "Tensor":
        _require_same_dims(self, other)
        return Tensor(self.data - other.data)

    def __mul__(self, scalar: float) -> "Tensor":
        return Tensor(self.data * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


def _require_same_dims(a: Tensor, b: Tensor):
    if a.dims != b.dims:
        for axis, (da, db) in zip("nchw", zip(a.dims, b.dims)):
            if da != db:
                raise ShapeError(f"Shape mismatch on axis {axis}: {da} != {db}")


@dataclass(frozen=True, eq=False)
class Conv2dKernel:
    """Weights (c_out, c_in, k_h, k_w) plus optional bias, stride and zero padding."""
    weights: Tensor
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            object.__setattr__(self, "weights", Tensor(self.weights))
        c_out, c_in, k_h, k_w = self.weights.dims
        if c_out < 1 or c_in < 1:
            raise ShapeError(f"Kernel needs c_out >= 1 and c_in >= 1, got {c_out}, {c_in}")
        if k_h % 2 == 0 or k_w % 2 == 0:
            raise ShapeError(f"Kernel sizes must be odd, got {k_h}x{k_w}")
        if self.stride not in (1, 2):
            raise ValueError(f"Stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"Padding must be non-negative, got {self.padding}")
        if self.bias is not None:
            bias = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
            if bias.shape[0] != c_out:
                raise ShapeError(f"Bias length {bias.shape[0]} != c_out {c_out}")
            bias.setflags(write=False)
            object.__setattr__(self, "bias", bias)

    @classmethod
    def create(cls, weights: np.ndarray, bias: Optional[np.ndarray] = None, stride: int = 1,
               padding: Optional[int] = None) -> "Conv2dKernel":
        """Kernel with 'same' padding (k // 2) unless padding is given."""
        weights = np.asarray(weights, dtype=np.float64)
        if padding is None:
            padding = weights.shape[2] // 2
        return cls(Tensor(weights), bias, stride, padding)

    @classmethod
    def kaiming(cls, c_out: int, c_in: int, rng: np.random.Generator, k: int = 3, stride: int = 1,
                bias: bool = False) -> "Conv2dKernel":
        """Fan-in scaled normal initialization."""
        std = np.sqrt(2.0 / (c_in * k * k))
        weights = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        return cls.create(weights, np.zeros(c_out) if bias else None, stride=stride)

    @classmethod
    def zeros(cls, c_out: int, c_in: int, k: int = 3, stride: int = 1, bias: bool = True) -> "Conv2dKernel":
        return cls.create(np.zeros((c_out, c_in, k, k)), np.zeros(c_out) if bias else None, stride=stride)

    @property
    def c_out(self) -> int:
        return self.weights.dims[0]

    @property
    def c_in(self) -> int:
        return self.weights.dims[1]

    @property
    def k_h(self) -> int:
        return self.weights.dims[2]

    @property
    def k_w(self) -> int:
        return self.weights.dims[3]

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        return ((h + 2 * self.padding - self.k_h) // self.stride + 1,
                (w + 2 * self.padding - self.k_w) // self.stride + 1)

    def with_arrays(self, weights: np.ndarray, bias: Optional[np.ndarray] = None) -> "Conv2dKernel":
        """Same geometry, new parameter values."""
        if self.bias is None:
            bias = None
        elif bias is None:
            bias = self.bias
        return Conv2dKernel(Tensor(weights), bias, self.stride, self.padding)


@dataclass(frozen=True, eq=False)
class GradTriple:
    """Reverse-mode gradients of a convolution."""
    grad_input: Tensor
    grad_weights: Tensor
    grad_bias: Optional[np.ndarray] = field(default=None)
