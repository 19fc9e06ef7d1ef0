"""Computation-aware Gaussian process regression."""

from .kernels import HyperParams, KernelSpec

__version__ = "0.1.0"
__all__ = ["HyperParams", "KernelSpec"]
