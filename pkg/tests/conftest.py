"""Shared fixtures for the pyramid convolution test suite."""

import numpy as np
import pytest

from src.core.pyramid import FeaturePyramid
from src.core.tensor import Conv2dKernel, Tensor
from src.utils.config import Calibration, load_calibration


@pytest.fixture(scope="session")
def calibration() -> Calibration:
    """Provide the committed golden thresholds."""
    return load_calibration()


@pytest.fixture
def rng():
    """Provide a seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def make_tensor(rng):
    """Provide a factory for uniform random tensors."""
    def factory(*dims):
        return Tensor.random(dims, rng)
    return factory


@pytest.fixture
def make_kernel(rng):
    """Provide a factory for random kernels."""
    def factory(c_out, c_in, k=3, stride=1, padding=None, bias=False):
        weights = rng.uniform(-1, 1, (c_out, c_in, k, k))
        b = rng.uniform(-1, 1, c_out) if bias else None
        return Conv2dKernel.create(weights, b, stride=stride, padding=padding)
    return factory


@pytest.fixture
def make_pyramid(rng):
    """Provide a factory for random ceil-halving pyramids."""
    def factory(n=1, c=2, base=8, levels=3, base_w=None):
        return FeaturePyramid.from_sizes(n, c, base, base_w or base, levels, rng)
    return factory


@pytest.fixture
def pyramid_dot():
    """Provide sum over levels of elementwise products."""
    def dot(a, b):
        return float(sum(np.sum(x.data * y.data) for x, y in zip(a.levels, b.levels)))
    return dot
