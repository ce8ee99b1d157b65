"""Voxel grids around query points: counts, occupancy, shells and weights.

Grids are indexed ``values[ix, iy, iz]``. A grid of side ``n`` and cell size
``w`` centred at ``c`` spans ``[c - n*w/2, c + n*w/2)`` on each axis and cell
``i`` covers the half-open interval ``[lo + i*w, lo + (i+1)*w)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud, SpatialIndex, atomic_write


@dataclass
class VoxelGrid:
    values: np.ndarray
    w: float
    center: np.ndarray
    kind: str = "count"

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) - 0.5 * self.n * self.w

    def cell_centers(self) -> np.ndarray:
        """World coordinates of every cell centre, shape (n, n, n, 3)."""
        i = (np.arange(self.n) + 0.5) * self.w
        g = np.stack(np.meshgrid(i, i, i, indexing="ij"), axis=-1)
        return g + self.lower


def check_grid_params(n: int, w: float) -> None:
    if n < 4 or n % 2:
        raise ValueError(f"grid side n must be even and >= 4, got {n}")
    if not w > 0:
        raise ValueError(f"cell size w must be positive, got {w}")


def count_points(pts: np.ndarray, lower: np.ndarray, n: int, w: float) -> np.ndarray:
    """Per-cell counts of ``pts`` in the grid with corner ``lower``."""
    idx = np.floor((pts - lower) / w).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < n), axis=1)
    idx = idx[ok]
    flat = (idx[:, 0] * n + idx[:, 1]) * n + idx[:, 2]
    return np.bincount(flat, minlength=n ** 3).reshape(n, n, n).astype(np.int32)


def extract_grid(cloud: PointCloud, index: SpatialIndex, center, n: int, w: float) -> VoxelGrid:
    """Point counts in the ``n``-cube of cell size ``w`` centred at ``center``."""
    check_grid_params(n, w)
    center = np.asarray(center, dtype=np.float64)
    lower = center - 0.5 * n * w
    cand = index.query_box(lower, lower + n * w)
    counts = count_points(cloud.points[cand], lower, n, w)
    return VoxelGrid(counts, w, center, "count")


def _rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment_and_extract(cloud: PointCloud, index: SpatialIndex, center, n: int, w: float,
                        seed=None, angle: float | None = None, shift: float | None = None) -> VoxelGrid:
    """Count grid after a random rotation about the vertical through ``center``
    and a random vertical shift of the cloud in ``[-w/2, w/2]``.

    ``seed`` may be an int or a ``numpy.random.Generator``; explicit ``angle``
    and ``shift`` override the random draws.
    """
    check_grid_params(n, w)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi) if angle is None else angle
    dz = rng.uniform(-0.5 * w, 0.5 * w) if shift is None else shift
    center = np.asarray(center, dtype=np.float64)
    half = 0.5 * n * w
    reach = half * np.sqrt(2.0) + w
    lo = center - np.array([reach, reach, half + w])
    hi = center + np.array([reach, reach, half + w])
    cand = index.query_box(lo, hi)
    local = cloud.points[cand] - center
    moved = local @ _rotation_z(theta).T
    moved[:, 2] += dz
    counts = count_points(moved, -np.full(3, half), n, w)
    return VoxelGrid(counts, w, center, "count")


def _as_values(grid):
    return grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)


def _rewrap(grid, values, kind):
    if isinstance(grid, VoxelGrid):
        return VoxelGrid(values, grid.w, grid.center, kind)
    return values


def binarize(grid, t_b: int = 2):
    """Occupancy: 1 where the count is at least ``t_b``, else 0.

    Accepts a :class:`VoxelGrid` or a bare array of counts of any shape.
    """
    if t_b < 1:
        raise ValueError(f"t_b must be >= 1, got {t_b}")
    if isinstance(grid, VoxelGrid) and grid.kind != "count":
        raise ValueError(f"binarize expects a count grid, got a {grid.kind} grid")
    v = _as_values(grid)
    if v.dtype.kind == "f" and (np.any(v != np.floor(v))):
        raise ValueError("binarize expects integer counts")
    if v.dtype.kind not in "iuf" or np.any(v < 0):
        raise ValueError("binarize expects non-negative counts")
    return _rewrap(grid, (v >= t_b).astype(np.uint8), "binary")


@lru_cache(maxsize=32)
def shell_mask(n: int, m: int) -> np.ndarray:
    """Boolean (n, n, n) mask of the cells kept in a shell of thickness ``m``."""
    if not 0 <= m < n / 2 - 1:
        raise ValueError(f"shell thickness m must satisfy 0 <= m < n/2 - 1, got m={m}, n={n}")
    i = np.arange(n)
    x, y, z = np.meshgrid(i, i, i, indexing="ij")
    lo = np.minimum(np.minimum(x, y), z)
    hi = np.maximum(np.maximum(x, y), z)
    mask = (lo <= m) | (hi >= n - m - 1)
    mask.setflags(write=False)
    return mask


def make_shell(grid, m: int = 3):
    """Zero every inner cell, keeping the outer layers selected by :func:`shell_mask`."""
    v = _as_values(grid)
    mask = shell_mask(v.shape[-1], m)
    out = np.where(mask, v, 0).astype(v.dtype)
    return _rewrap(grid, out, getattr(grid, "kind", None))


def make_weights(grid):
    """0 where a cell holds exactly one point, 1 everywhere else."""
    v = _as_values(grid)
    return _rewrap(grid, (v != 1).astype(np.uint8), "binary")


def dump_grid_csv(path, grid: VoxelGrid | np.ndarray) -> None:
    """Write the non-zero cells as ``ix,iy,iz,value`` rows for inspection."""
    v = _as_values(grid)
    idx = np.argwhere(v != 0)
    lines = ["ix,iy,iz,value"]
    lines += [f"{a},{b},{c},{v[a, b, c]}" for a, b, c in idx]
    atomic_write(Path(path), "\n".join(lines) + "\n")
