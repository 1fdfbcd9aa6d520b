"""Viewpoint codebook geometry.

Template viewpoints are the vertices of a recursively subdivided icosahedron,
optionally cut to an upper spherical cap and crossed with a set of equally
spaced in-plane rotations. Pose distances between viewpoints are geodesic
angles on the view sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateOrientationError, ParameterError, ValidationError

MAX_SUBDIVISION_LEVEL = 6

# Coordinates are deduplicated and tie-broken on a grid of this resolution.
_COORD_DECIMALS = 9

_UNIT_NORM_TOL = 1e-9
_ROTATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Viewpoint:
    """A camera position on the unit view sphere plus an in-plane roll.

    `direction` points from the object (origin) to the camera and must be a
    unit vector; `inplane_deg` is the rotation about the optical axis in
    degrees, in [0, 360).
    """

    direction: np.ndarray
    inplane_deg: float = 0.0

    def __post_init__(self) -> None:
        d = self.direction
        if not (isinstance(d, np.ndarray) and d.dtype == np.float64 and d.shape == (3,)):
            d = np.asarray(d, dtype=np.float64).reshape(-1)
            if d.shape != (3,):
                raise ValidationError(f"direction must be a 3-vector, got shape {d.shape}")
        x, y, z = d
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise ValidationError("direction must be finite")
        norm = math.sqrt(x * x + y * y + z * z)
        if abs(norm - 1.0) > _UNIT_NORM_TOL:
            raise ValidationError(f"direction must be unit length, |v| = {norm!r}")
        ang = float(self.inplane_deg)
        if not (0.0 <= ang < 360.0) or not math.isfinite(ang):
            raise ValidationError(f"inplane_deg must lie in [0, 360), got {ang!r}")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "inplane_deg", ang)

    @classmethod
    def of(cls, direction, inplane_deg: float = 0.0) -> "Viewpoint":
        """Build a viewpoint from an arbitrary nonzero vector, normalizing it
        and wrapping the in-plane angle into [0, 360)."""
        d = np.asarray(direction, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            raise ValidationError("cannot normalize a zero direction")
        return cls(d / norm, float(inplane_deg) % 360.0)


def _base_icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    # Oriented with two vertices on the +-z poles; the two 5-rings sit at
    # z = +-1/sqrt(5). The hemisphere cut depends on this orientation.
    c = 1.0 / math.sqrt(5.0)
    s = 2.0 / math.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        a = math.radians(72.0 * k)
        verts.append((s * math.cos(a), s * math.sin(a), c))
    for k in range(5):
        a = math.radians(72.0 * k + 36.0)
        verts.append((s * math.cos(a), s * math.sin(a), -c))
    verts.append((0.0, 0.0, -1.0))

    faces: list[tuple[int, int, int]] = []
    for k in range(5):
        k2 = (k + 1) % 5
        faces.append((0, 1 + k, 1 + k2))            # north cap
        faces.append((1 + k, 6 + k, 1 + k2))        # upper band
        faces.append((6 + k, 6 + k2, 1 + k2))       # lower band
        faces.append((11, 6 + k2, 6 + k))           # south cap
    return np.array(verts, dtype=np.float64), faces


def icosphere_vertices(level: int) -> np.ndarray:
    """Vertices of the icosahedron subdivided `level` times, as an (N, 3)
    array of unit vectors.

    Each subdivision splits every triangle into four by edge midpoints
    projected back onto the sphere, so N = 10 * 4**level + 2. The returned
    order is deterministic: sorted by (z, y, x) descending on coordinates
    rounded to 1e-9.
    """
    level = int(level)
    if level < 0:
        raise ParameterError(f"subdivision level must be >= 0, got {level}")
    if level > MAX_SUBDIVISION_LEVEL:
        raise ParameterError(
            f"subdivision level {level} exceeds the maximum of {MAX_SUBDIVISION_LEVEL}"
        )

    verts_arr, faces = _base_icosahedron()
    verts: list[np.ndarray] = [v for v in verts_arr]
    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            idx = midpoint_cache.get(key)
            if idx is None:
                m = verts[i] + verts[j]
                m = m / np.linalg.norm(m)
                idx = len(verts)
                verts.append(m)
                midpoint_cache[key] = idx
            return idx

        next_faces: list[tuple[int, int, int]] = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces

    points = np.asarray(verts, dtype=np.float64)
    # Midpoint caching already dedups shared edges; rounding handles any
    # residual coincidences and makes equal latitudes tie exactly in the sort.
    rounded = np.round(points, _COORD_DECIMALS)
    _, keep = np.unique(rounded, axis=0, return_index=True)
    points = points[np.sort(keep)]
    rounded = rounded[np.sort(keep)]

    order = np.lexsort((-rounded[:, 0], -rounded[:, 1], -rounded[:, 2]))
    return points[order]


def hemisphere_filter(points: np.ndarray, min_z: float) -> np.ndarray:
    """Keep the points with z >= min_z, preserving order.

    min_z = -1 keeps everything; min_z = 0 keeps the closed upper half-sphere.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ParameterError(f"points must be (N, 3), got shape {pts.shape}")
    return pts[pts[:, 2] >= float(min_z)]


def inplane_angles(n_inplane: int) -> np.ndarray:
    """n equally spaced in-plane angles starting at 0: k * 360 / n degrees."""
    n = int(n_inplane)
    if n < 1:
        raise ParameterError(f"n_inplane must be >= 1, got {n}")
    return np.arange(n, dtype=np.float64) * (360.0 / n)


def viewpoint_grid(points: np.ndarray, n_inplane: int) -> list[Viewpoint]:
    """Cartesian product of explicit view directions with n_inplane equally
    spaced in-plane angles; directions iterate in the outer loop."""
    pts = np.asarray(points, dtype=np.float64)
    angles = inplane_angles(n_inplane)
    return [Viewpoint(p, a) for p in pts for a in angles]


def enumerate_viewpoints(level: int, min_z: float, n_inplane: int) -> list[Viewpoint]:
    """Full template codebook: subdivided icosahedron vertices, cut at min_z,
    crossed with n_inplane in-plane rotations.

    The count is exactly |{v : v.z >= min_z}| * n_inplane.
    """
    return viewpoint_grid(hemisphere_filter(icosphere_vertices(level), min_z), n_inplane)


def rotation_about_z(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    return np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])


def is_rotation_matrix(r: np.ndarray, tol: float = _ROTATION_TOL) -> bool:
    """True when r is orthonormal with determinant +1 within tol."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if not np.allclose(r @ r.T, np.eye(3), atol=tol):
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def viewpoint_to_rotation(v: Viewpoint, up_hint=None) -> np.ndarray:
    """World-to-camera rotation for a camera at `v.direction` looking at the
    origin, rolled by the viewpoint's in-plane angle.

    The third row of the result is -direction. `up_hint` fixes the roll
    reference; when omitted it defaults to +z, falling back to +y at the
    poles. An explicitly supplied hint that is parallel to the viewing
    direction raises DegenerateOrientationError so the caller can pick
    another one.
    """
    forward = -v.direction  # camera z-axis, from camera towards the object

    if up_hint is None:
        up = np.array([0.0, 0.0, 1.0])
        if np.linalg.norm(np.cross(forward, up)) <= 1e-6:
            up = np.array([0.0, 1.0, 0.0])
    else:
        up = np.asarray(up_hint, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(up)
        if norm < 1e-12:
            raise DegenerateOrientationError("up hint must be a nonzero vector")
        up = up / norm
        if np.linalg.norm(np.cross(forward, up)) <= 1e-6:
            raise DegenerateOrientationError(
                "up hint is parallel to the viewing direction; supply another hint"
            )

    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)  # completes a right-handed row basis
    base = np.stack([right, down, forward])
    return rotation_about_z(v.inplane_deg) @ base


def pose_error_deg(a: Viewpoint, b: Viewpoint) -> float:
    """Geodesic angle in degrees between two view directions, in [0, 180].

    In-plane rotation is deliberately ignored; pose accuracy is measured on
    the viewing sphere only.
    """
    d = float(np.dot(a.direction, b.direction))
    return math.degrees(math.acos(min(1.0, max(-1.0, d))))


def elevation_deg(v: Viewpoint) -> float:
    """Angle in degrees from the +z axis to the view direction."""
    return math.degrees(math.acos(min(1.0, max(-1.0, float(v.direction[2])))))


def symmetric_pose_error_deg(a: Viewpoint, b: Viewpoint) -> float:
    """Pose error for objects symmetric about the z-axis.

    Minimizing the geodesic angle over all rotations of `a` about z leaves
    only the difference of the two elevations, which is the closed form used
    here.
    """
    return abs(elevation_deg(a) - elevation_deg(b))
