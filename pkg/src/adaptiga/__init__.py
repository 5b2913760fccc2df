"""Adaptive isogeometric analysis on trimmed 2D spline domains.

The package provides truncated hierarchical B-splines, trimmed-domain
bookkeeping with cut-cell quadrature, Poisson / plane-strain elasticity /
Kirchhoff-Love shell kernels, a per-element bubble error estimator and the
refine-solve-estimate loop driving it, plus a benchmark command line runner.
"""

from .bspline import (
    GeometryError,
    GeometryMap,
    KnotVector,
    SplineError,
    TensorSplineSpace,
    two_scale_matrix,
)

__all__ = [
    "GeometryError",
    "GeometryMap",
    "KnotVector",
    "SplineError",
    "TensorSplineSpace",
    "two_scale_matrix",
]

__version__ = "0.1.0"
