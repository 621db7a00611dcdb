"""Pyramid convolution toolkit: PConv, SEPC, integrated BN and Gaussian scale-space checks."""

__version__ = "0.1.0"
