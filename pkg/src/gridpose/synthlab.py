"""Synthetic objects with pose-consistent raw feature grids.

Each object is a smooth random field over (viewpoint, cell): descriptors are
bilinear in a low-degree spherical-harmonic basis of the view direction and
a grid of Gaussian bumps over the in-plane-rotated cell coordinates, with
seeded Gaussian coefficients. Nearby viewpoints therefore produce nearby
descriptors, which is what makes retrieval against a template codebook
meaningful. Silhouettes are procedural ellipses; cells outside the
silhouette hold a fixed backdrop pattern, mimicking the uniform background
of a synthetic render. Occlusion is simulated by overwriting a contiguous
rectangle with descriptors from a different seeded field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .grids import BinaryMask, FeatureGrid
from .viewsphere import Viewpoint

VIEW_BASIS_DIM = 16
_BUMPS_PER_SIDE = 5
_BUMP_WIDTH = 0.3
CELL_BASIS_DIM = _BUMPS_PER_SIDE * _BUMPS_PER_SIDE

_FIELD_SCALE = 1.0 / math.sqrt(VIEW_BASIS_DIM * CELL_BASIS_DIM)

# Real spherical harmonics up to degree 3. Degree 3 is a sweet spot: the
# field's angle correlation decays smoothly and mostly monotonically out to
# ~60 degrees; higher degrees oscillate inside that range and scramble the
# pose-to-similarity ordering.
_SH_C0 = 0.5 / math.sqrt(math.pi)
_SH_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_SH_C2A = 0.5 * math.sqrt(15.0 / math.pi)
_SH_C2B = 0.25 * math.sqrt(5.0 / math.pi)
_SH_C2C = 0.25 * math.sqrt(15.0 / math.pi)
_SH_C3 = (
    0.25 * math.sqrt(35.0 / (2.0 * math.pi)),
    0.5 * math.sqrt(105.0 / math.pi),
    0.25 * math.sqrt(21.0 / (2.0 * math.pi)),
    0.25 * math.sqrt(7.0 / math.pi),
    0.25 * math.sqrt(21.0 / (2.0 * math.pi)),
    0.25 * math.sqrt(105.0 / math.pi),
    0.25 * math.sqrt(35.0 / (2.0 * math.pi)),
)


def _view_basis(direction: np.ndarray) -> np.ndarray:
    x, y, z = direction
    return np.array(
        [
            _SH_C0,
            _SH_C1 * y,
            _SH_C1 * z,
            _SH_C1 * x,
            _SH_C2A * x * y,
            _SH_C2A * y * z,
            _SH_C2B * (3.0 * z * z - 1.0),
            _SH_C2A * z * x,
            _SH_C2C * (x * x - y * y),
            _SH_C3[0] * y * (3.0 * x * x - y * y),
            _SH_C3[1] * x * y * z,
            _SH_C3[2] * y * (5.0 * z * z - 1.0),
            _SH_C3[3] * z * (5.0 * z * z - 3.0),
            _SH_C3[4] * x * (5.0 * z * z - 1.0),
            _SH_C3[5] * z * (x * x - y * y),
            _SH_C3[6] * x * (x * x - 3.0 * y * y),
        ]
    )


def _cell_coords(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    # Cell centers in [-1, 1] x [-1, 1]; u runs along columns, v along rows.
    u = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    v = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    return np.meshgrid(u, v)


_BUMP_CENTERS = np.linspace(-1.0, 1.0, _BUMPS_PER_SIDE)


def _cell_basis(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gaussian bumps on a grid of centers. Localized basis functions keep
    distinct cells loosely correlated, so the masked mean of per-cell
    similarities concentrates instead of being dominated by a few modes."""
    feats = [
        np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2.0 * _BUMP_WIDTH**2))
        for cy in _BUMP_CENTERS
        for cx in _BUMP_CENTERS
    ]
    return np.stack(feats, axis=-1)


def backdrop_pattern(channels: int) -> np.ndarray:
    """Fixed nonzero pattern filling background cells of every render."""
    return 0.5 * np.cos(0.8 * np.arange(channels) + 0.3)


@dataclass(frozen=True, eq=False)
class SynthObject:
    """One synthetic object: seeded field coefficients plus an ellipse
    silhouette. The same (object, viewpoint, cell) always yields the same
    descriptor.

    The last `nuisance_channels` channels carry no object signal: they are
    zero in clean renders and hold render-specific junk in noisy ones, which
    gives a trainable embedding something real to learn (suppress them).
    """

    object_id: int
    height: int
    width: int
    channels: int
    nuisance_channels: int
    coeffs: np.ndarray        # (VIEW_BASIS_DIM, CELL_BASIS_DIM, signal channels)
    ellipse: np.ndarray       # (cx, cy, semi_u, semi_v, tilt_deg)

    @property
    def signal_channels(self) -> int:
        return self.channels - self.nuisance_channels

    @classmethod
    def create(
        cls,
        object_id: int,
        height: int = 16,
        width: int = 16,
        channels: int = 8,
        master_seed: int = 0,
        nuisance_channels: int = 0,
    ) -> "SynthObject":
        """Deterministically derive an object from (master_seed, object_id)."""
        if object_id < 0:
            raise ParameterError(f"object_id must be >= 0, got {object_id}")
        if not (0 <= nuisance_channels < channels):
            raise ParameterError(
                f"nuisance_channels must lie in [0, channels), got {nuisance_channels}"
            )
        rng = np.random.default_rng(np.random.SeedSequence([int(master_seed), int(object_id)]))
        coeffs = rng.standard_normal(
            (VIEW_BASIS_DIM, CELL_BASIS_DIM, channels - nuisance_channels)
        )
        ellipse = np.array(
            [
                rng.uniform(-0.15, 0.15),
                rng.uniform(-0.15, 0.15),
                rng.uniform(0.55, 0.85),
                rng.uniform(0.55, 0.85),
                rng.uniform(0.0, 180.0),
            ]
        )
        return cls(
            object_id=int(object_id),
            height=int(height),
            width=int(width),
            channels=int(channels),
            nuisance_channels=int(nuisance_channels),
            coeffs=coeffs,
            ellipse=ellipse,
        )


def _rotated_coords(
    height: int, width: int, angle_deg: float
) -> tuple[np.ndarray, np.ndarray]:
    u, v = _cell_coords(height, width)
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    return ca * u + sa * v, -sa * u + ca * v


def _base_grid(obj: SynthObject, v: Viewpoint) -> np.ndarray:
    y = _view_basis(v.direction)
    ur, vr = _rotated_coords(obj.height, obj.width, -v.inplane_deg)
    basis = _cell_basis(ur, vr)
    signal = _FIELD_SCALE * np.einsum("j,hwk,jkc->hwc", y, basis, obj.coeffs)
    if obj.nuisance_channels == 0:
        return signal
    grid = np.zeros((obj.height, obj.width, obj.channels))
    grid[..., : obj.signal_channels] = signal
    return grid


def silhouette(obj: SynthObject, v: Viewpoint) -> BinaryMask:
    """Elliptical silhouette, tilted with the in-plane angle. Never empty:
    the cell nearest the ellipse center is forced on."""
    cx, cy, semi_u, semi_v, tilt = obj.ellipse
    ur, vr = _rotated_coords(obj.height, obj.width, -(tilt + v.inplane_deg))
    inside = ((ur - cx) / semi_u) ** 2 + ((vr - cy) / semi_v) ** 2 <= 1.0
    cells = inside.astype(np.uint8)
    if not cells.any():
        row = min(obj.height - 1, max(0, int(round((cy + 1.0) / 2.0 * obj.height))))
        col = min(obj.width - 1, max(0, int(round((cx + 1.0) / 2.0 * obj.width))))
        cells[row, col] = 1
    return BinaryMask(cells)


# Junk in the nuisance channels of a noisy render, relative to the signal rms.
NUISANCE_AMPLITUDE = 1.5


def render_synth(
    obj: SynthObject, v: Viewpoint, noise_sigma: float, seed: int = 0
) -> tuple[FeatureGrid, BinaryMask]:
    """Raw feature grid and silhouette for one view of one object.

    noise_sigma = 0 reproduces the object's field exactly (a clean template).
    noise_sigma > 0 adds seeded Gaussian perturbation over the whole grid and
    fills the object's nuisance channels, if any, with render-specific smooth
    junk (a stand-in for a real image crop).
    """
    noise_sigma = float(noise_sigma)
    if noise_sigma < 0.0 or not math.isfinite(noise_sigma):
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma!r}")
    mask = silhouette(obj, v)
    grid = _base_grid(obj, v)
    grid[mask.cells == 0] = backdrop_pattern(obj.channels)
    if noise_sigma > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        if obj.nuisance_channels:
            signal_rms = math.sqrt(float((grid[..., : obj.signal_channels] ** 2).mean()))
            junk = _distractor_field(
                obj.height, obj.width, obj.nuisance_channels, rng,
                NUISANCE_AMPLITUDE * signal_rms,
            )
            grid[..., obj.signal_channels :] += junk
        grid = grid + noise_sigma * rng.standard_normal(grid.shape)
    return FeatureGrid(grid), mask


def _distractor_field(
    height: int, width: int, channels: int, rng: np.random.Generator, scale: float
) -> np.ndarray:
    # Smooth junk from its own seeded coefficients: structured like an
    # object, unrelated to any object.
    coeffs = rng.standard_normal((CELL_BASIS_DIM, channels))
    u, v = _cell_coords(height, width)
    values = np.einsum("hwk,kc->hwc", _cell_basis(u, v), coeffs)
    rms = math.sqrt(float((values ** 2).mean())) or 1.0
    return values * (scale / rms)


def _best_rectangle(
    mask: np.ndarray, anchor: tuple[int, int], target: int
) -> tuple[int, int, int, int]:
    """Rectangle containing `anchor` whose overlap with the mask's 1-cells is
    closest to `target`; ties prefer smaller area, then lexicographic corner
    order. Exhaustive over all anchored rectangles via 2D prefix sums."""
    h, w = mask.shape
    ar, ac = anchor
    prefix = np.zeros((h + 1, w + 1), dtype=np.int64)
    prefix[1:, 1:] = mask.cumsum(axis=0).cumsum(axis=1)

    r0 = np.arange(0, ar + 1)
    r1 = np.arange(ar, h)
    c0 = np.arange(0, ac + 1)
    c1 = np.arange(ac, w)
    covered = (
        prefix[np.ix_(r1 + 1, c1 + 1)][None, :, None, :]
        - prefix[np.ix_(r0, c1 + 1)][:, None, None, :]
        - prefix[np.ix_(r1 + 1, c0)][None, :, :, None]
        + prefix[np.ix_(r0, c0)][:, None, :, None]
    )  # (|r0|, |r1|, |c0|, |c1|)
    area = (
        (r1[None, :] - r0[:, None] + 1)[:, :, None, None]
        * (c1[None, :] - c0[:, None] + 1)[None, None, :, :]
    )
    badness = np.abs(covered - target) * (h * w + 1) + area
    flat = int(np.argmin(badness))  # argmin is first occurrence: lexicographic tie-break
    i0, i1, j0, j1 = np.unravel_index(flat, badness.shape)
    return int(r0[i0]), int(r1[i1]), int(c0[j0]), int(c1[j1])


def _occlusion_rectangle(
    m: BinaryMask, fraction: float, rng: np.random.Generator
) -> tuple[int, int, int, int] | None:
    fraction = float(fraction)
    if not (0.0 <= fraction <= 1.0):
        raise ParameterError(f"fraction must lie in [0, 1], got {fraction!r}")
    target = int(round(fraction * m.popcount))
    if target == 0:
        return None
    fg_rows, fg_cols = np.nonzero(m.cells)
    pick = int(rng.integers(len(fg_rows)))
    anchor = (int(fg_rows[pick]), int(fg_cols[pick]))
    return _best_rectangle(m.cells, anchor, target)


def apply_occlusion(
    g: FeatureGrid, m: BinaryMask, fraction: float, seed: int = 0
) -> FeatureGrid:
    """Overwrite a seeded contiguous rectangle covering approximately
    `fraction` of the mask's foreground cells with distractor descriptors.

    The mask itself is left untouched: at query time the occlusion is
    unknown. fraction = 0 returns an unchanged copy; fraction = 1 covers
    every foreground cell.
    """
    if (g.height, g.width) != (m.height, m.width):
        raise ParameterError("grid and mask dimensions must agree")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    rect = _occlusion_rectangle(m, fraction, rng)
    out = g.data.copy()
    if rect is None:
        return FeatureGrid(out)
    r0, r1, c0, c1 = rect
    masked_rms = math.sqrt(float((g.data[m.cells > 0] ** 2).mean())) or 1.0
    junk = _distractor_field(g.height, g.width, g.channels, rng, masked_rms)
    out[r0 : r1 + 1, c0 : c1 + 1, :] = junk[r0 : r1 + 1, c0 : c1 + 1, :]
    return FeatureGrid(out)


def occluded_cell_count(m: BinaryMask, fraction: float, seed: int = 0) -> int:
    """Foreground cells the occluder of `apply_occlusion` would cover, for
    the same (mask, fraction, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    rect = _occlusion_rectangle(m, fraction, rng)
    if rect is None:
        return 0
    r0, r1, c0, c1 = rect
    return int(m.cells[r0 : r1 + 1, c0 : c1 + 1].sum())


def randomize_background(
    g: FeatureGrid, m: BinaryMask, seed: int = 0, scale: float = 1.0
) -> FeatureGrid:
    """Replace every background cell with distractor-field values, simulating
    a cluttered real-image background behind the object. `scale` sets the
    clutter amplitude relative to the foreground rms."""
    if (g.height, g.width) != (m.height, m.width):
        raise ParameterError("grid and mask dimensions must agree")
    if scale <= 0.0:
        raise ParameterError(f"scale must be positive, got {scale!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    masked = g.data[m.cells > 0]
    rms = math.sqrt(float((masked ** 2).mean())) if masked.size else 1.0
    junk = _distractor_field(g.height, g.width, g.channels, rng, float(scale) * (rms or 1.0))
    out = g.data.copy()
    bg = m.cells == 0
    out[bg] = junk[bg]
    return FeatureGrid(out)
