"""Finite-volume solver and analysis toolkit for the voltage-conductance kinetic equation."""

from .grid import DensityField, Grid, build_grid
from .model import ModelParams, WeightSpec

__version__ = "0.1.0"

__all__ = ["DensityField", "Grid", "ModelParams", "WeightSpec", "build_grid", "__version__"]
