"""LoRA and SymLoRA adapters with a desk-scale verification harness."""

from .matrix import Matrix, matmul, frobenius_norm, entrywise_abs_sum, max_abs_diff
from .rng import SeededRng, gaussian_matrix, RNG_ALGORITHM
from .linalg import jacobi_eigh, singular_values, rank_ratio
from .autodiff import (
    Tape,
    Node,
    GradientMap,
    backward,
    finite_difference_gradient,
    max_relative_error,
    check_gradients,
)

__all__ = [
    "Matrix",
    "matmul",
    "frobenius_norm",
    "entrywise_abs_sum",
    "max_abs_diff",
    "SeededRng",
    "gaussian_matrix",
    "RNG_ALGORITHM",
    "jacobi_eigh",
    "singular_values",
    "rank_ratio",
    "Tape",
    "Node",
    "GradientMap",
    "backward",
    "finite_difference_gradient",
    "max_relative_error",
    "check_gradients",
]
