"""Numerical laboratory for exterior-domain overdetermined bifurcation studies."""

__version__ = "0.1.0"

from .grids import ProblemParams, RadialGrid, build_grid, build_wholespace_grid

__all__ = ["ProblemParams", "RadialGrid", "build_grid", "build_wholespace_grid", "__version__"]
