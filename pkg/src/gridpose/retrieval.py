"""Template database and brute-force pose retrieval.

The database keeps one contiguous float32 feature arena in (template, row,
col, channel) order with byte masks alongside, so scoring a query is a
linear scan by the fused kernel. Iteration order is (object_id,
template_index) ascending and ties in score are broken the same way, which
makes rankings deterministic regardless of thread count or backend.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import _kernels
from .errors import (
    BuildError,
    DimensionError,
    InsufficientDataError,
    NotFoundError,
    ParameterError,
    ValidationError,
)
from .grids import BinaryMask, FeatureGrid, unit_cells
from .similarity import (
    DEFAULT_OCCLUSION_DELTA,
    SimilarityReport,
    sim_masked,
    sim_occlusion_aware,
)
from .viewsphere import (
    Viewpoint,
    is_rotation_matrix,
    pose_error_deg,
    symmetric_pose_error_deg,
)

# Stored per template: render distance (mm), box diagonal (px), focal length
# (px), box center (px, relative to the render camera's principal point).
_META_FIELDS = 5

_NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class RenderMeta:
    """Calibration of the synthetic view a template was rendered from, the
    inputs translation recovery needs. The box center is expressed relative
    to the render camera's principal point."""

    t_temp_z_mm: float
    bb_diag_px: float
    focal_px: float
    bb_center_px: np.ndarray

    def __post_init__(self) -> None:
        center = np.asarray(self.bb_center_px, dtype=np.float64).reshape(-1)
        if center.shape != (2,) or not np.all(np.isfinite(center)):
            raise ValidationError("bb_center_px must be a finite 2-vector")
        for name in ("t_temp_z_mm", "bb_diag_px", "focal_px"):
            value = float(getattr(self, name))
            if not (value > 0.0) or not np.isfinite(value):
                raise ValidationError(f"{name} must be positive, got {value!r}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "bb_center_px", center)

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.t_temp_z_mm, self.bb_diag_px, self.focal_px, *self.bb_center_px]
        )

    @classmethod
    def from_row(cls, row: np.ndarray) -> "RenderMeta":
        return cls(float(row[0]), float(row[1]), float(row[2]), row[3:5])


@dataclass(frozen=True, eq=False)
class TemplateRecord:
    """One template: pose label, normalized feature grid, visibility mask,
    and render calibration."""

    object_id: int
    template_index: int
    viewpoint: Viewpoint
    rotation: np.ndarray
    features: FeatureGrid
    mask: BinaryMask
    render_meta: RenderMeta

    def __post_init__(self) -> None:
        if int(self.object_id) < 0 or int(self.template_index) < 0:
            raise ValidationError("object_id and template_index must be >= 0")
        object.__setattr__(self, "object_id", int(self.object_id))
        object.__setattr__(self, "template_index", int(self.template_index))
        rot = np.asarray(self.rotation, dtype=np.float64)
        if not is_rotation_matrix(rot):
            raise ValidationError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        if (self.features.height, self.features.width) != (self.mask.height, self.mask.width):
            raise DimensionError("feature grid and mask dimensions must agree")
        if self.mask.popcount < 1:
            raise ValidationError("template mask needs at least one foreground cell")
        norms = np.linalg.norm(self.features.cells().astype(np.float64), axis=1)
        if not np.all((norms < _NORM_TOL) | (np.abs(norms - 1.0) < _NORM_TOL)):
            raise ValidationError("template features must be cell-normalized")


class MatchEntry(NamedTuple):
    object_id: int
    template_index: int
    score: float


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Ranked candidates, scores non-increasing; ties broken by (object_id,
    template_index) ascending. `top_report` carries per-cell evidence for the
    best entry when requested."""

    entries: list[MatchEntry]
    top_report: SimilarityReport | None = None

    @property
    def best(self) -> MatchEntry:
        return self.entries[0]


class TemplateDB:
    """Immutable indexed template collection with a contiguous scan arena.

    Construct through build_db() or from_arrays(); instances are safe to
    share across threads.
    """

    def __init__(
        self,
        height: int,
        width: int,
        channels: int,
        object_ids: np.ndarray,
        template_indices: np.ndarray,
        viewpoints: np.ndarray,
        rotations: np.ndarray,
        metas: np.ndarray,
        features: np.ndarray,
        masks: np.ndarray,
        _validated: bool = False,
    ) -> None:
        if not _validated:
            raise BuildError("use build_db() or TemplateDB.from_arrays()")
        self.height = height
        self.width = width
        self.channels = channels
        self._object_ids = object_ids
        self._template_indices = template_indices
        self._viewpoints = viewpoints
        self._rotations = rotations
        self._metas = metas
        self._features = features
        self._masks = masks
        self._popcounts = masks.sum(axis=1).astype(np.int64)
        self._slices: dict[int, tuple[int, int]] = {}
        boundaries = np.flatnonzero(np.diff(object_ids)) + 1
        starts = np.concatenate([[0], boundaries])
        stops = np.concatenate([boundaries, [len(object_ids)]])
        for s, t in zip(starts, stops):
            self._slices[int(object_ids[s])] = (int(s), int(t))

    def __len__(self) -> int:
        return len(self._object_ids)

    @property
    def object_ids(self) -> list[int]:
        return sorted(self._slices)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def object_slice(self, object_id: int) -> tuple[int, int]:
        try:
            return self._slices[int(object_id)]
        except KeyError:
            raise NotFoundError(f"no templates for object {object_id}") from None

    def identity(self, position: int) -> tuple[int, int]:
        return int(self._object_ids[position]), int(self._template_indices[position])

    def viewpoint(self, position: int) -> Viewpoint:
        row = self._viewpoints[position]
        return Viewpoint(row[:3], float(row[3]))

    def rotation(self, position: int) -> np.ndarray:
        return self._rotations[position].copy()

    def render_meta(self, position: int) -> RenderMeta:
        return RenderMeta.from_row(self._metas[position])

    def features_at(self, position: int) -> FeatureGrid:
        return FeatureGrid(
            self._features[position].reshape(self.height, self.width, self.channels)
        )

    def mask_at(self, position: int) -> BinaryMask:
        return BinaryMask(self._masks[position].reshape(self.height, self.width))

    def position_of(self, object_id: int, template_index: int) -> int:
        start, stop = self.object_slice(object_id)
        idx = np.searchsorted(self._template_indices[start:stop], template_index)
        if idx >= stop - start or self._template_indices[start + idx] != template_index:
            raise NotFoundError(f"object {object_id} has no template {template_index}")
        return start + int(idx)

    def arena(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(features, masks, popcounts) views for kernel-level access."""
        return self._features, self._masks, self._popcounts

    @classmethod
    def from_arrays(
        cls,
        object_ids: np.ndarray,
        template_indices: np.ndarray,
        viewpoints: np.ndarray,
        rotations: np.ndarray,
        metas: np.ndarray,
        features: np.ndarray,
        masks: np.ndarray,
        grid_shape: tuple[int, int, int],
    ) -> "TemplateDB":
        """Bulk constructor; features must be (T, H*W, C) float32 with
        normalized cells, masks (T, H*W) bytes. Rows must be sorted by
        (object_id, template_index)."""
        height, width, channels = map(int, grid_shape)
        n = len(object_ids)
        if n == 0:
            raise BuildError("template database cannot be empty")
        object_ids = np.asarray(object_ids, dtype=np.int64)
        template_indices = np.asarray(template_indices, dtype=np.int64)
        viewpoints = np.ascontiguousarray(viewpoints, dtype=np.float64)
        rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        metas = np.ascontiguousarray(metas, dtype=np.float64)
        features = np.ascontiguousarray(features, dtype=np.float32)
        masks = np.ascontiguousarray(masks, dtype=np.uint8)
        if features.shape != (n, height * width, channels):
            raise BuildError(f"feature arena shape {features.shape} does not match")
        if masks.shape != (n, height * width):
            raise BuildError(f"mask arena shape {masks.shape} does not match")
        if viewpoints.shape != (n, 4) or rotations.shape != (n, 3, 3):
            raise BuildError("pose arrays have wrong shapes")
        if metas.shape != (n, _META_FIELDS):
            raise BuildError("render meta array has wrong shape")

        if object_ids.min() < 0 or template_indices.min() < 0:
            raise BuildError("object ids and template indices must be >= 0")
        if n > 1:
            keys = np.stack([object_ids, template_indices], axis=1)
            ordered = (keys[1:, 0] > keys[:-1, 0]) | (
                (keys[1:, 0] == keys[:-1, 0]) & (keys[1:, 1] > keys[:-1, 1])
            )
            if not np.all(ordered):
                raise BuildError(
                    "rows must be strictly sorted by (object_id, template_index)"
                )
        pops = masks.sum(axis=1)
        if pops.min() < 1:
            raise BuildError("every template mask needs at least one foreground cell")
        norms = np.sqrt(np.einsum("tlc,tlc->tl", features, features, dtype=np.float64))
        if not np.all((norms < _NORM_TOL) | (np.abs(norms - 1.0) < _NORM_TOL)):
            raise BuildError("template features must be cell-normalized")
        return cls(
            height,
            width,
            channels,
            object_ids,
            template_indices,
            viewpoints,
            rotations,
            metas,
            features,
            masks,
            _validated=True,
        )


def build_db(records: Sequence[TemplateRecord]) -> TemplateDB:
    """Assemble an immutable database from records.

    Grid dimensions must be uniform and (object_id, template_index) unique;
    iteration order is (object_id, template_index) ascending.
    """
    records = list(records)
    if not records:
        raise BuildError("template database cannot be empty")
    shape = records[0].features.shape
    for r in records:
        if r.features.shape != shape:
            raise BuildError(
                f"all templates must share grid shape {shape}, got {r.features.shape}"
            )
    keys = {(r.object_id, r.template_index) for r in records}
    if len(keys) != len(records):
        raise BuildError("duplicate (object_id, template_index) in records")
    records.sort(key=lambda r: (r.object_id, r.template_index))

    n = len(records)
    height, width, channels = shape
    features = np.empty((n, height * width, channels), dtype=np.float32)
    masks = np.empty((n, height * width), dtype=np.uint8)
    viewpoints = np.empty((n, 4))
    rotations = np.empty((n, 3, 3))
    metas = np.empty((n, _META_FIELDS))
    for i, r in enumerate(records):
        features[i] = r.features.cells()
        masks[i] = r.mask.cells.reshape(-1)
        viewpoints[i, :3] = r.viewpoint.direction
        viewpoints[i, 3] = r.viewpoint.inplane_deg
        rotations[i] = r.rotation
        metas[i] = r.render_meta.as_row()
    return TemplateDB.from_arrays(
        np.array([r.object_id for r in records]),
        np.array([r.template_index for r in records]),
        viewpoints,
        rotations,
        metas,
        features,
        masks,
        shape,
    )


def db_from_tpdb(data, embedding=None, normalize: bool = False) -> TemplateDB:
    """Build a scan-ready database from parsed TPDB contents.

    `embedding` (optional) maps raw channels through a per-cell linear layer
    first; `normalize=True` rescales every cell to unit norm. Loading an
    already-built database needs neither, and skipping normalization keeps
    the feature bytes identical across a write/read round trip.
    """
    feats = data.features
    channels = data.channels
    if embedding is not None:
        if embedding.c_in != data.channels:
            raise DimensionError(
                f"file has {data.channels} channels, embedding expects {embedding.c_in}"
            )
        feats = (
            np.einsum("tli,oi->tlo", feats.astype(np.float64), embedding.weight)
            + embedding.bias
        )
        channels = embedding.c_out
        normalize = True
    if normalize:
        arr = feats.astype(np.float64, copy=False)
        norms = np.sqrt(np.einsum("tlc,tlc->tl", arr, arr))
        norms[norms < 1e-12] = 1.0
        feats = (arr / norms[..., None]).astype(np.float32)
    return TemplateDB.from_arrays(
        data.object_ids,
        data.template_indices(),
        data.viewpoints,
        data.rotations,
        data.metas,
        np.ascontiguousarray(feats, dtype=np.float32),
        data.masks,
        (data.height, data.width, channels),
    )


def tpdb_from_db(db: TemplateDB):
    """TPDB contents of a database, for serialization."""
    from .iofmt import TpdbData

    feats, masks, _ = db.arena()
    return TpdbData(
        height=db.height,
        width=db.width,
        channels=db.channels,
        object_ids=db._object_ids.copy(),
        viewpoints=db._viewpoints.copy(),
        rotations=db._rotations.copy(),
        metas=db._metas.copy(),
        masks=masks.copy(),
        features=feats.copy(),
    )


def match(
    query: FeatureGrid,
    db: TemplateDB,
    k: int = 1,
    delta: float = DEFAULT_OCCLUSION_DELTA,
    use_occlusion: bool = True,
    restrict_object: int | None = None,
    threads: int = 1,
    with_report: bool = False,
    backend: str | None = None,
) -> MatchResult:
    """Score the query against every (restricted) template and return the
    top k.

    use_occlusion=False scores with the plain masked similarity instead of
    the occlusion-aware one. k beyond the candidate count truncates; an
    unknown restrict_object raises NotFoundError.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if not (-1.0 <= float(delta) <= 1.0):
        raise ParameterError(f"delta must lie in [-1, 1], got {delta!r}")
    if query.shape != db.grid_shape:
        raise DimensionError(
            f"query shape {query.shape} does not match database {db.grid_shape}"
        )
    feats, masks, pops = db.arena()
    if restrict_object is None:
        start, stop = 0, len(db)
    else:
        start, stop = db.object_slice(restrict_object)

    q_units = unit_cells(query.data).reshape(-1, db.channels)
    scores = _kernels.score_templates(
        feats[start:stop],
        masks[start:stop],
        pops[start:stop],
        q_units,
        float(delta),
        bool(use_occlusion),
        threads=int(threads),
        backend=backend,
    )
    # Stable sort on descending score keeps DB order among ties, i.e.
    # (object_id, template_index) ascending.
    order = np.argsort(-scores, kind="stable")[: min(k, stop - start)]
    entries = [
        MatchEntry(*db.identity(start + int(i)), float(scores[int(i)])) for i in order
    ]

    report = None
    if with_report and entries:
        top = start + int(order[0])
        t_grid = db.features_at(top)
        t_mask = db.mask_at(top)
        if use_occlusion:
            report = sim_occlusion_aware(query, t_grid, t_mask, delta)
        else:
            report = sim_masked(query, t_grid, t_mask)
    return MatchResult(entries=entries, top_report=report)


def _pose_error_for(
    predicted: Viewpoint,
    truth: Viewpoint,
    object_id: int,
    symmetric_object_ids,
) -> float:
    if object_id in symmetric_object_ids:
        return symmetric_pose_error_deg(predicted, truth)
    return pose_error_deg(predicted, truth)


def acc15(
    predictions: Sequence[tuple[int, Viewpoint]],
    ground_truth: Sequence[tuple[int, Viewpoint]],
    symmetric_object_ids=(),
    angle_thresh_deg: float = 15.0,
) -> float:
    """Fraction of predictions with the correct object class AND a pose error
    strictly below the threshold.

    Objects listed in symmetric_object_ids are scored with the z-symmetric
    pose error.
    """
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    if len(predictions) != len(ground_truth):
        raise ParameterError("predictions and ground truth must have equal length")
    if not predictions:
        raise ParameterError("cannot score an empty prediction list")
    symmetric = set(symmetric_object_ids)
    hits = 0
    for (pred_id, pred_vp), (true_id, true_vp) in zip(predictions, ground_truth):
        if pred_id != true_id:
            continue
        if _pose_error_for(pred_vp, true_vp, true_id, symmetric) < angle_thresh_deg:
            hits += 1
    return hits / len(predictions)


def mean_pose_error(
    predictions: Sequence[tuple[int, Viewpoint]],
    ground_truth: Sequence[tuple[int, Viewpoint]],
    symmetric_object_ids=(),
) -> float:
    """Mean pose error in degrees; a class-incorrect prediction contributes
    180 (the sphere's diameter) by convention."""
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    if len(predictions) != len(ground_truth):
        raise ParameterError("predictions and ground truth must have equal length")
    if not predictions:
        raise ParameterError("cannot score an empty prediction list")
    symmetric = set(symmetric_object_ids)
    errors = []
    for (pred_id, pred_vp), (true_id, true_vp) in zip(predictions, ground_truth):
        if pred_id != true_id:
            errors.append(180.0)
        else:
            errors.append(_pose_error_for(pred_vp, true_vp, true_id, symmetric))
    return float(np.mean(errors))


def rank_correlation_diag(
    queries: Sequence[tuple[FeatureGrid, Viewpoint]],
    db: TemplateDB,
    max_pose_deg: float | None = None,
) -> float:
    """Spearman rank correlation between pose distance and representation
    distance (1 - score) over all query-template pairs of a single object.

    A strongly positive value means nearby poses score high, the property
    retrieval relies on. `max_pose_deg` restricts the statistic to pairs
    closer than the cutoff (the region that decides rank-1 retrieval).
    """
    if len(db.object_ids) != 1:
        raise ParameterError("rank correlation diagnostic expects a single-object database")
    pose_d: list[float] = []
    repr_d: list[float] = []
    for grid, truth_vp in queries:
        result = match(grid, db, k=len(db), use_occlusion=False)
        for oid, tidx, score in result.entries:
            angle = pose_error_deg(truth_vp, db.viewpoint(db.position_of(oid, tidx)))
            if max_pose_deg is not None and angle >= max_pose_deg:
                continue
            pose_d.append(angle)
            repr_d.append(1.0 - score)
    if len(pose_d) < 3:
        raise InsufficientDataError(
            f"need at least 3 query-template pairs, got {len(pose_d)}"
        )
    rho = spearmanr(pose_d, repr_d).statistic
    return float(rho)
