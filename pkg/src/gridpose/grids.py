"""Local-representation data model.

A FeatureGrid is an H x W grid of C-dimensional descriptors that keeps the
2D structure of the image; a BinaryMask marks foreground cells; a SimMap
holds one cosine similarity per cell. All similarity arithmetic is done per
cell, never on pooled representations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

# Cells with a smaller L2 norm are treated as exact zero vectors; their
# cosine similarity with anything is defined as 0.
ZERO_CELL_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Dense (H, W, C) grid of local descriptors, row-major with contiguous
    channels so each cell's C values sit next to each other in memory."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"feature grid must be (H, W, C), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValidationError(f"feature grid dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("feature grid contains non-finite values")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def cells(self) -> np.ndarray:
        """(H*W, C) view of the cell descriptors."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass(eq=False)
class BinaryMask:
    """(H, W) grid of {0, 1} bytes with a cached count of ones."""

    cells: np.ndarray
    popcount: int = field(init=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.cells)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ValidationError(f"mask must be a non-empty (H, W) array, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"mask cells must be integers, got dtype {arr.dtype}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError("mask cells must be 0 or 1")
        self.cells = np.ascontiguousarray(arr.astype(np.uint8))
        self.popcount = int(self.cells.sum())

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        """All-ones mask (no cell discarded)."""
        return cls(np.ones((height, width), dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class SimMap:
    """(H, W) grid of per-cell cosine similarities in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ValidationError(f"sim map must be (H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("sim map contains non-finite values")
        if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
            raise ValidationError("sim map values must lie in [-1, 1]")
        object.__setattr__(self, "values", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def unit_cells(data: np.ndarray) -> np.ndarray:
    """Float64 copy of (H, W, C) data with every cell scaled to unit norm;
    cells below ZERO_CELL_EPS become exact zero vectors."""
    arr = np.asarray(data, dtype=np.float64)
    norms = np.sqrt(np.einsum("hwc,hwc->hw", arr, arr))
    safe = np.where(norms < ZERO_CELL_EPS, 1.0, norms)
    out = arr / safe[..., None]
    out[norms < ZERO_CELL_EPS] = 0.0
    return out


def normalize_cells(g: FeatureGrid) -> FeatureGrid:
    """Scale every cell to unit L2 norm (zero cells stay zero). The result
    keeps the input's dtype."""
    return FeatureGrid(unit_cells(g.data).astype(g.data.dtype, copy=False))


def check_same_shape(a: FeatureGrid, b: FeatureGrid) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"grid shapes differ: {a.shape} vs {b.shape}")


def check_mask_fits(g: FeatureGrid, m: BinaryMask) -> None:
    if (g.height, g.width) != (m.height, m.width):
        raise DimensionError(
            f"mask shape {(m.height, m.width)} does not match grid {(g.height, g.width)}"
        )


def local_cosine(q: FeatureGrid, t: FeatureGrid) -> SimMap:
    """Per-cell cosine similarity between two grids of identical shape.

    Each cell is normalized independently, so rescaling any cell by a
    positive factor leaves the result unchanged; zero cells score 0.
    """
    check_same_shape(q, t)
    qn = unit_cells(q.data)
    tn = unit_cells(t.data)
    values = np.einsum("hwc,hwc->hw", qn, tn)
    return SimMap(np.clip(values, -1.0, 1.0))
