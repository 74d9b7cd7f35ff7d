"""Benchmark problem builders."""
from .benchmarks import (
    Problem,
    QoiSpec,
    RadSpec,
    build_from_descriptor,
    build_highdim_diffusion,
    build_identity_problem,
    build_qoi,
    build_rad2d,
    build_weighted_metric,
    mc_relative_error,
    qoi_stats,
    reference_solve,
)
from .polynomials import LegendreBasis, ProductBasis

__all__ = [
    "Problem", "QoiSpec", "RadSpec", "build_from_descriptor", "build_highdim_diffusion",
    "build_identity_problem", "build_qoi",
    "build_rad2d", "build_weighted_metric", "mc_relative_error", "qoi_stats",
    "reference_solve", "LegendreBasis", "ProductBasis",
]
