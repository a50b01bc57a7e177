"""Nested structured grids on the unit square and oversampled regions.

Fine cells are indexed row-major with y outer and x inner, ``c = iy * nx + ix``,
so a ``(ny, nx)`` array reshaped with ``ravel()`` follows the cell numbering.
Face-centred quantities are stored as two arrays: x-normal faces with shape
``(ny, nx + 1)`` and y-normal faces with shape ``(ny + 1, nx)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

INF = math.inf


class ConfigurationError(ValueError):
    """Raised for inconsistent grid or experiment settings."""


@dataclass(frozen=True)
class FineGrid:
    nx: int
    ny: int

    @property
    def h(self) -> float:
        return 1.0 / self.nx

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    @cached_property
    def cell_index(self) -> np.ndarray:
        return np.arange(self.n_cells).reshape(self.ny, self.nx)

    @cached_property
    def x_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """(left, right) cell pairs of interior x-normal faces, row-major order."""
        idx = self.cell_index
        return idx[:, :-1].ravel(), idx[:, 1:].ravel()

    @cached_property
    def y_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """(bottom, top) cell pairs of interior y-normal faces."""
        idx = self.cell_index
        return idx[:-1, :].ravel(), idx[1:, :].ravel()

    @cached_property
    def interior_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """All interior faces as (minus, plus) cell pairs; x faces first."""
        xl, xr = self.x_faces
        yb, yt = self.y_faces
        return np.concatenate([xl, yb]), np.concatenate([xr, yt])

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """Boundary faces as rows ``(cell, axis, side)``; side is -1 or +1."""
        idx = self.cell_index
        rows = [
            np.column_stack([idx[:, 0], np.zeros(self.ny, int), -np.ones(self.ny, int)]),
            np.column_stack([idx[:, -1], np.zeros(self.ny, int), np.ones(self.ny, int)]),
            np.column_stack([idx[0, :], np.ones(self.nx, int), -np.ones(self.nx, int)]),
            np.column_stack([idx[-1, :], np.ones(self.nx, int), np.ones(self.nx, int)]),
        ]
        return np.vstack(rows)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.h
        y = (np.arange(self.ny) + 0.5) * self.h
        return np.meshgrid(x, y)

    def interior_face_fluxes(self, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
        """Flatten face arrays into the ``interior_faces`` ordering."""
        return np.concatenate([fx[:, 1:-1].ravel(), fy[1:-1, :].ravel()])


@dataclass(frozen=True)
class CoarseGrid:
    fine: FineGrid
    N1: int

    @property
    def H(self) -> float:
        return 1.0 / self.N1

    @property
    def ratio(self) -> int:
        return self.fine.nx // self.N1

    @property
    def n_cells(self) -> int:
        return self.N1 * self.N1

    @cached_property
    def coarse_of_fine(self) -> np.ndarray:
        """Coarse index of every fine cell, shape ``(ny, nx)``."""
        r = self.ratio
        iy, ix = np.divmod(self.fine.cell_index, self.fine.nx)
        return (iy // r) * self.N1 + ix // r

    def coarse_ij(self, i: int) -> tuple[int, int]:
        """(I, J) position of coarse cell ``i``; I along x."""
        J, I = divmod(i, self.N1)
        return I, J

    def fine_cells(self, i: int) -> np.ndarray:
        I, J = self.coarse_ij(i)
        r = self.ratio
        return self.fine.cell_index[J * r:(J + 1) * r, I * r:(I + 1) * r].ravel()

    @cached_property
    def faces(self) -> list[tuple[int, int]]:
        """Interior coarse faces as (minus, plus) coarse-cell pairs."""
        out = []
        for J in range(self.N1):
            for I in range(self.N1):
                i = J * self.N1 + I
                if I + 1 < self.N1:
                    out.append((i, i + 1))
                if J + 1 < self.N1:
                    out.append((i, i + self.N1))
        return out


@dataclass(frozen=True)
class OversampleRegion:
    """Coarse cell ``center`` enlarged by ``layers`` coarse layers, clipped to the domain.

    The region is always a box of coarse cells ``[I0, I1) x [J0, J1)``.
    """

    coarse: CoarseGrid
    center: int
    layers: float
    I0: int
    I1: int
    J0: int
    J1: int
    coarse_cells: np.ndarray = field(repr=False)
    fine_cells: np.ndarray = field(repr=False)

    @property
    def fine_shape(self) -> tuple[int, int]:
        r = self.coarse.ratio
        return (self.J1 - self.J0) * r, (self.I1 - self.I0) * r

    @property
    def is_global(self) -> bool:
        return len(self.coarse_cells) == self.coarse.n_cells

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """Fine faces on the region boundary as rows ``(inside, outside)``.

        ``outside`` is -1 where the region boundary lies on the domain boundary.
        """
        fg = self.coarse.fine
        r = self.coarse.ratio
        idx = fg.cell_index
        x0, x1, y0, y1 = self.I0 * r, self.I1 * r, self.J0 * r, self.J1 * r
        sides = []
        col = np.arange(y0, y1)
        row = np.arange(x0, x1)
        sides.append((idx[col, x0], idx[col, x0 - 1] if x0 > 0 else -np.ones_like(col)))
        sides.append((idx[col, x1 - 1], idx[col, x1] if x1 < fg.nx else -np.ones_like(col)))
        sides.append((idx[y0, row], idx[y0 - 1, row] if y0 > 0 else -np.ones_like(row)))
        sides.append((idx[y1 - 1, row], idx[y1, row] if y1 < fg.ny else -np.ones_like(row)))
        return np.vstack([np.column_stack(s) for s in sides])

    def contains(self, i: int) -> bool:
        I, J = self.coarse.coarse_ij(i)
        return self.I0 <= I < self.I1 and self.J0 <= J < self.J1


def build_grids(nx: int, N1: int) -> tuple[FineGrid, CoarseGrid]:
    """Square fine grid of ``nx`` cells per axis nested in ``N1`` coarse cells per axis."""
    if N1 < 1 or nx < 2 * N1:
        raise ConfigurationError(f"need nx >= 2*N1, got nx={nx}, N1={N1}")
    if nx % N1:
        raise ConfigurationError(f"nx={nx} is not divisible by N1={N1}")
    fg = FineGrid(nx, nx)
    return fg, CoarseGrid(fg, N1)


def oversample(cg: CoarseGrid, i: int, layers: float) -> OversampleRegion:
    """Box of coarse cells within Chebyshev distance ``layers`` of ``i``.

    ``layers=math.inf`` (or ``None``) selects the whole domain.
    """
    if not 0 <= i < cg.n_cells:
        raise IndexError(f"coarse index {i} out of range [0, {cg.n_cells})")
    if layers is None:
        layers = INF
    if layers < 0:
        raise ConfigurationError("layers must be non-negative")
    I, J = cg.coarse_ij(i)
    k = cg.N1 if math.isinf(layers) else int(layers)
    I0, I1 = max(I - k, 0), min(I + k + 1, cg.N1)
    J0, J1 = max(J - k, 0), min(J + k + 1, cg.N1)
    Js, Is = np.meshgrid(np.arange(J0, J1), np.arange(I0, I1), indexing="ij")
    coarse_cells = (Js * cg.N1 + Is).ravel()
    r = cg.ratio
    fine_cells = cg.fine.cell_index[J0 * r:J1 * r, I0 * r:I1 * r].ravel()
    return OversampleRegion(cg, i, float(layers), I0, I1, J0, J1, coarse_cells, fine_cells)
