"""Solver-free PDE parameter inference with derivative-constrained Gaussian processes."""

__version__ = "0.1.0"

from .kernels import (  # noqa: F401
    MaternHyperparams,
    MultiIndex,
    matern_base,
    matern_derivative,
    product_kernel_mixed_derivative,
)
from .pde import PdeSystem, augment, builtin_system  # noqa: F401
