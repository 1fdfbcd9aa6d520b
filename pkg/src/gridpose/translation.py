"""Projective distance estimation.

Recovers the query object's camera-frame translation from the retrieved
template: depth scales with the ratio of bounding-box diagonals and focal
lengths, and the lateral offset comes from back-projecting the two box
centers through their respective intrinsics. All lengths are millimeters,
pixels for image quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError


@dataclass(frozen=True, eq=False)
class Intrinsics:
    """Pinhole camera with square pixels: a focal length and a principal
    point. Skew and anisotropic scaling are deliberately out of scope."""

    focal_px: float
    principal_point_px: np.ndarray

    def __post_init__(self) -> None:
        f = float(self.focal_px)
        if not (f > 0.0) or not np.isfinite(f):
            raise ValidationError(f"focal_px must be positive, got {f!r}")
        pp = np.asarray(self.principal_point_px, dtype=np.float64).reshape(-1)
        if pp.shape != (2,) or not np.all(np.isfinite(pp)):
            raise ValidationError("principal_point_px must be a finite 2-vector")
        object.__setattr__(self, "focal_px", f)
        object.__setattr__(self, "principal_point_px", pp)

    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point_px
        return np.array(
            [[self.focal_px, 0.0, cx], [0.0, self.focal_px, cy], [0.0, 0.0, 1.0]]
        )

    def back_project(self, point_px: np.ndarray) -> np.ndarray:
        """K^-1 applied to the homogeneous pixel (u, v, 1)."""
        u, v = np.asarray(point_px, dtype=np.float64).reshape(2)
        cx, cy = self.principal_point_px
        return np.array([(u - cx) / self.focal_px, (v - cy) / self.focal_px, 1.0])


@dataclass(frozen=True, eq=False)
class BBox:
    """Axis-aligned box summarized by its center and diagonal length."""

    center_px: np.ndarray
    diag_px: float

    def __post_init__(self) -> None:
        center = np.asarray(self.center_px, dtype=np.float64).reshape(-1)
        if center.shape != (2,) or not np.all(np.isfinite(center)):
            raise ValidationError("center_px must be a finite 2-vector")
        d = float(self.diag_px)
        if not (d > 0.0) or not np.isfinite(d):
            raise ValidationError(f"diag_px must be positive, got {d!r}")
        object.__setattr__(self, "center_px", center)
        object.__setattr__(self, "diag_px", d)


def estimate_z(
    t_temp_z: float,
    bb_temp: BBox,
    bb_query: BBox,
    k_temp: Intrinsics,
    k_query: Intrinsics,
) -> float:
    """Query depth in mm: the render depth scaled by the box-diagonal ratio
    and the focal-length ratio."""
    t_temp_z = float(t_temp_z)
    if not (t_temp_z > 0.0) or not np.isfinite(t_temp_z):
        raise ParameterError(f"t_temp_z must be positive, got {t_temp_z!r}")
    return t_temp_z * (bb_temp.diag_px / bb_query.diag_px) * (
        k_query.focal_px / k_temp.focal_px
    )


def estimate_translation(
    t_temp_z: float,
    bb_temp: BBox,
    bb_query: BBox,
    k_temp: Intrinsics,
    k_query: Intrinsics,
) -> np.ndarray:
    """Full 3D translation of the query object in mm.

    The template sits at (0, 0, t_temp_z) in its render camera; the offset
    between the back-projected box centers, scaled by the respective depths,
    moves that point to the query camera frame. The z component equals
    estimate_z exactly.
    """
    z_query = estimate_z(t_temp_z, bb_temp, bb_query, k_temp, k_query)
    t_temp = np.array([0.0, 0.0, float(t_temp_z)])
    delta = z_query * k_query.back_project(bb_query.center_px) - float(
        t_temp_z
    ) * k_temp.back_project(bb_temp.center_px)
    out = t_temp + delta
    # The homogeneous third coordinates are exactly 1, so the z component is
    # z_query by construction; assigning it avoids add/subtract round-off.
    out[2] = z_query
    return out
