from weaksal.densecrf.lattice import PermutohedralLattice, gaussian_filter_bruteforce, lattice_filter
from weaksal.densecrf.meanfield import (
    CrfParams,
    PairwiseKernels,
    UnaryPotentials,
    build_unary,
    kernel_features,
    mean_field,
    mean_field_refine,
)

__all__ = [
    "CrfParams",
    "PairwiseKernels",
    "PermutohedralLattice",
    "UnaryPotentials",
    "build_unary",
    "gaussian_filter_bruteforce",
    "kernel_features",
    "lattice_filter",
    "mean_field",
    "mean_field_refine",
]
