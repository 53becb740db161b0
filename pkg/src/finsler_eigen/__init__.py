"""Anisotropic norms, Wulff-shape geometry and p-Laplacian eigenvalue solvers."""

__version__ = "0.1.0"

from .anisotropy import (EllipseNorm, LqNorm, NormSpec, PolarNorm, RotatedNorm, SmoothedPolytopeNorm,
                         WulffShape, norm_from_json, wulff_measure)
from .convexgeom import ConvexPolygon, MetricReport, builtin_domain, metric_report, spindle
from .errors import ConfigError, DomainError, KinkError, SolverError
from .fem import ScalarField, TriMesh, triangulate
from .spectra import EigenResult, SolverOptions, dirichlet_eigenvalue, neumann_eigenvalue, pi_p

__all__ = [
    "ConfigError", "ConvexPolygon", "DomainError", "EigenResult", "EllipseNorm", "KinkError",
    "LqNorm", "MetricReport", "NormSpec", "PolarNorm", "RotatedNorm", "ScalarField",
    "SmoothedPolytopeNorm", "SolverError", "SolverOptions", "TriMesh", "WulffShape",
    "builtin_domain", "dirichlet_eigenvalue", "metric_report", "neumann_eigenvalue",
    "norm_from_json", "pi_p", "spindle", "triangulate", "wulff_measure",
]
