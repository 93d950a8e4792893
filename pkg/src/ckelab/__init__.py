"""Numerical deformation theory of coupled Kähler–Einstein metrics on toric Fano manifolds."""

__version__ = "0.1.0"

from .curvature import MetricTuple, cke_residual, ricci_potential
from .errors import CKEError
from .grid import Grid
from .toric import catalog, get_background, make_decomposition, product_decomposition, scaled_decomposition

__all__ = [
    "CKEError",
    "Grid",
    "MetricTuple",
    "catalog",
    "cke_residual",
    "get_background",
    "make_decomposition",
    "product_decomposition",
    "ricci_potential",
    "scaled_decomposition",
]
