"""Core modules for the pyramid convolution toolkit."""

from .config import (
    BNMode,
    CostModelInput,
    HeadConfig,
    SepcVariant,
    SizeMode
)

from .tensor import (
    Conv2dKernel,
    ShapeError,
    Tensor
)

from .pyramid import (
    FeaturePyramid,
    PConvLayer,
    pconv_forward,
    pconv_vjp
)

from .sepc import (
    SepcLayer,
    sepc_forward,
    sepc_vjp
)

from .training import (
    PyramidHead,
    train_head
)

__all__ = [
    'BNMode',
    'CostModelInput',
    'HeadConfig',
    'SepcVariant',
    'SizeMode',
    'Conv2dKernel',
    'ShapeError',
    'Tensor',
    'FeaturePyramid',
    'PConvLayer',
    'pconv_forward',
    'pconv_vjp',
    'SepcLayer',
    'sepc_forward',
    'sepc_vjp',
    'PyramidHead',
    'train_head'
]
