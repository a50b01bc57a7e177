"""Nonlocal multicontinuum upscaling of flow and transport in 2D porous media."""

from upscale.grid import (
    CoarseGrid,
    ConfigurationError,
    FineGrid,
    OversampleRegion,
    build_grids,
    oversample,
)

__all__ = [
    "CoarseGrid",
    "ConfigurationError",
    "FineGrid",
    "OversampleRegion",
    "build_grids",
    "oversample",
]

__version__ = "0.1.0"
