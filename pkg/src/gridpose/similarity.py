"""Masked and occlusion-aware similarity between a query grid and a template.

The score is the mean cosine similarity over the template's foreground
cells. At run time an occlusion mask can additionally switch off cells whose
similarity falls below a threshold, on the assumption that an occluder
replaced the object there; switched-off cells still count in the normalizer,
so occlusion dilutes rather than renormalizes the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, ParameterError
from .grids import BinaryMask, FeatureGrid, SimMap, check_mask_fits, check_same_shape, local_cosine

DEFAULT_OCCLUSION_DELTA = 0.2


@dataclass(frozen=True, eq=False)
class SimilarityReport:
    """Score plus the per-cell evidence it was computed from.

    Invariant: score == sum(mask * occlusion * sim) / mask_popcount. When
    occlusion handling is off, occlusion_map is all ones.
    """

    score: float
    sim_map: SimMap
    occlusion_map: BinaryMask
    mask_popcount: int

    def recompute_score(self, mask: BinaryMask) -> float:
        weights = mask.cells.astype(np.float64) * self.occlusion_map.cells
        return float((weights * self.sim_map.values).sum() / self.mask_popcount)


def _check_inputs(q: FeatureGrid, t: FeatureGrid, m: BinaryMask) -> None:
    check_same_shape(q, t)
    check_mask_fits(t, m)
    if m.popcount < 1:
        raise EmptyMaskError("visibility mask has no foreground cells")


def sim_masked(q: FeatureGrid, t: FeatureGrid, m: BinaryMask) -> SimilarityReport:
    """Training-time similarity: mean per-cell cosine over the template's
    visibility mask."""
    _check_inputs(q, t, m)
    s = local_cosine(q, t)
    score = float((m.cells * s.values).sum() / m.popcount)
    ones = BinaryMask.full(m.height, m.width)
    return SimilarityReport(score=score, sim_map=s, occlusion_map=ones, mask_popcount=m.popcount)


def occlusion_map(s: SimMap, delta: float) -> BinaryMask:
    """Cells whose similarity strictly exceeds delta; everything else is
    treated as occluded. Ties at delta are off."""
    delta = float(delta)
    if not (-1.0 <= delta <= 1.0):
        raise ParameterError(f"delta must lie in [-1, 1], got {delta!r}")
    return BinaryMask((s.values > delta).astype(np.uint8))


def sim_occlusion_aware(
    q: FeatureGrid,
    t: FeatureGrid,
    m: BinaryMask,
    delta: float = DEFAULT_OCCLUSION_DELTA,
    renormalize: bool = False,
) -> SimilarityReport:
    """Run-time similarity with occluded cells switched off.

    The normalizer stays the visibility-mask popcount, so occluded cells
    contribute zero and still dilute the mean. `renormalize=True` divides by
    the surviving cell count instead (ablation mode, off by default; an empty
    intersection scores 0).
    """
    _check_inputs(q, t, m)
    delta = float(delta)
    if not (-1.0 <= delta <= 1.0):
        raise ParameterError(f"delta must lie in [-1, 1], got {delta!r}")
    s = local_cosine(q, t)
    occ = occlusion_map(s, delta)
    active = (m.cells & occ.cells).astype(np.float64)
    total = float((active * s.values).sum())
    if renormalize:
        n_active = int(active.sum())
        score = total / n_active if n_active else 0.0
        popcount = n_active if n_active else m.popcount
    else:
        score = total / m.popcount
        popcount = m.popcount
    return SimilarityReport(score=score, sim_map=s, occlusion_map=occ, mask_popcount=popcount)
