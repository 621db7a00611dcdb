"""Utility modules for the pyramid convolution toolkit."""
