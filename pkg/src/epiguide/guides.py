"""Rasterize epipolar lines into binary cell-to-cell indicator maps.

Each cell of the image-1 grid anchors one epipolar line (through the cell's
center pixel); the guide marks every image-2 cell whose closed rectangle the
line touches. Marking is conservative: a line that only grazes a corner
still counts, so any point lying exactly on the line always has its
containing cell marked, at any grid resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange
from .geometry import FundamentalMatrix

_LINE_EPS = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Square cell grid of s x s cells tiling a width x height image."""

    s: int
    width: int
    height: int

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("grid must have at least one cell per side")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def n_cells(self) -> int:
        return self.s * self.s

    def cell_centers(self) -> np.ndarray:
        """(s*s, 2) pixel centers, row-major (cell (r, c) at index r*s + c)."""
        cw = self.width / self.s
        ch = self.height / self.s
        cols, rows = np.meshgrid(np.arange(self.s), np.arange(self.s))
        x = (cols.ravel() + 0.5) * cw
        y = (rows.ravel() + 0.5) * ch
        return np.column_stack([x, y])

    def x_edges(self) -> np.ndarray:
        return np.arange(self.s + 1) * (self.width / self.s)

    def y_edges(self) -> np.ndarray:
        return np.arange(self.s + 1) * (self.height / self.s)

    def cell_of(self, pixel) -> int:
        """Row-major index of the cell containing a pixel (edges clamp inward)."""
        col = min(int(pixel[0] / (self.width / self.s)), self.s - 1)
        row = min(int(pixel[1] / (self.height / self.s)), self.s - 1)
        if pixel[0] < 0 or pixel[1] < 0 or pixel[0] > self.width or pixel[1] > self.height:
            raise IndexOutOfRange(f"pixel {tuple(pixel)} outside the image")
        return row * self.s + col


@dataclass(frozen=True)
class EpipolarGuide:
    """Binary maps g12 (image-1 cells to image-2 cells) and g21 (reverse)."""

    g12: np.ndarray
    g21: np.ndarray
    grid1: GridSpec
    grid2: GridSpec

    def __post_init__(self):
        for name, g, na, nb in (
            ("g12", self.g12, self.grid1.n_cells, self.grid2.n_cells),
            ("g21", self.g21, self.grid2.n_cells, self.grid1.n_cells),
        ):
            arr = np.asarray(g, dtype=np.uint8)
            if arr.shape != (na, nb):
                raise ValueError(f"{name} must have shape {(na, nb)}, got {arr.shape}")
            if arr.max(initial=0) > 1:
                raise ValueError(f"{name} entries must be 0 or 1")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _lines_for_centers(f_matrix: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Unit-normal epipolar lines per center; NaN rows where the line vanishes."""
    hom = np.column_stack([centers, np.ones(len(centers))])
    lines = hom @ f_matrix.T
    norms = np.hypot(lines[:, 0], lines[:, 1])
    out = np.full_like(lines, np.nan)
    ok = norms >= _LINE_EPS
    out[ok] = lines[ok] / norms[ok, None]
    return out


def _rasterize_lines(lines: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(n_lines, s*s) hit mask: line touches the closed cell rectangle.

    A cell counts as hit when its four corners do not all lie strictly on
    one side of the line.
    """
    gx = grid.x_edges()
    gy = grid.y_edges()
    a = lines[:, 0][:, None, None]
    b = lines[:, 1][:, None, None]
    c = lines[:, 2][:, None, None]
    corner = a * gx[None, None, :] + b * gy[None, :, None] + c
    m1 = corner[:, :-1, :-1]
    m2 = corner[:, :-1, 1:]
    m3 = corner[:, 1:, :-1]
    m4 = corner[:, 1:, 1:]
    lo = np.minimum(np.minimum(m1, m2), np.minimum(m3, m4))
    hi = np.maximum(np.maximum(m1, m2), np.maximum(m3, m4))
    hits = (lo <= 0.0) & (hi >= 0.0)
    hits[np.isnan(lines[:, 0])] = False
    return hits.reshape(len(lines), grid.n_cells).astype(np.uint8)


def rasterize_guide(f: FundamentalMatrix, grid1: GridSpec, grid2: GridSpec) -> EpipolarGuide:
    """Build both directional guides for a canonical fundamental matrix.

    A cell whose center is the epipole (zero line) gets an all-zero row, as
    does any cell whose line misses the image entirely.
    """
    g12 = _rasterize_lines(_lines_for_centers(f.m, grid1.cell_centers()), grid2)
    g21 = _rasterize_lines(_lines_for_centers(f.m.T, grid2.cell_centers()), grid1)
    return EpipolarGuide(g12=g12, g21=g21, grid1=grid1, grid2=grid2)


def epipolar_sets(guide: EpipolarGuide, direction: str, i: int) -> set[int]:
    """Support of row i of the chosen directional map ("12" or "21")."""
    if direction == "12":
        g, limit = guide.g12, guide.grid1.n_cells
    elif direction == "21":
        g, limit = guide.g21, guide.grid2.n_cells
    else:
        raise ValueError(f"direction must be '12' or '21', got {direction!r}")
    if not 0 <= i < limit:
        raise IndexOutOfRange(f"cell index {i} outside [0, {limit})")
    return set(np.flatnonzero(g[i]).tolist())
