"""gridpose: template-based 3D object pose retrieval over local feature
grids.

Workflow: sample a viewpoint codebook on the icosphere, render (or
synthesize) per-view template grids with visibility masks, optionally train
a per-cell embedding with the contrastive loss, then match query grids
against the template database with masked, occlusion-aware cosine scoring.
"""

from ._kernels import ACTIVE_BACKEND, available_backends
from .errors import (
    BatchContractError,
    BuildError,
    CorruptDataError,
    DegenerateOrientationError,
    DimensionError,
    EmptyMaskError,
    FormatError,
    GridPoseError,
    InsufficientDataError,
    MagicError,
    NotFoundError,
    ParameterError,
    TruncationError,
    ValidationError,
    VersionError,
)
from .grids import BinaryMask, FeatureGrid, SimMap, local_cosine, normalize_cells
from .losses import (
    FeatureGradients,
    PairLabel,
    check_mutually_negative,
    infonce_grad_sim,
    infonce_loss,
    is_positive_pair,
    loss_grad_features,
    pairwise_loss,
    triplet_loss,
)
from .retrieval import (
    MatchEntry,
    MatchResult,
    RenderMeta,
    TemplateDB,
    TemplateRecord,
    acc15,
    build_db,
    db_from_tpdb,
    match,
    mean_pose_error,
    rank_correlation_diag,
    tpdb_from_db,
)
from .similarity import (
    SimilarityReport,
    occlusion_map,
    sim_masked,
    sim_occlusion_aware,
)
from .synthlab import SynthObject, apply_occlusion, randomize_background, render_synth
from .trainer import (
    LinearEmbedding,
    MlpEmbedding,
    TrainConfig,
    TrainPair,
    TrainResult,
    embed,
    sample_batch,
    train_demo,
    train_step,
)
from .translation import BBox, Intrinsics, estimate_translation, estimate_z
from .viewsphere import (
    Viewpoint,
    enumerate_viewpoints,
    hemisphere_filter,
    icosphere_vertices,
    pose_error_deg,
    symmetric_pose_error_deg,
    viewpoint_grid,
    viewpoint_to_rotation,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIVE_BACKEND",
    "available_backends",
    "BatchContractError",
    "BuildError",
    "CorruptDataError",
    "DegenerateOrientationError",
    "DimensionError",
    "EmptyMaskError",
    "FormatError",
    "GridPoseError",
    "InsufficientDataError",
    "MagicError",
    "NotFoundError",
    "ParameterError",
    "TruncationError",
    "ValidationError",
    "VersionError",
    "BinaryMask",
    "FeatureGrid",
    "SimMap",
    "local_cosine",
    "normalize_cells",
    "FeatureGradients",
    "PairLabel",
    "check_mutually_negative",
    "infonce_grad_sim",
    "infonce_loss",
    "is_positive_pair",
    "loss_grad_features",
    "pairwise_loss",
    "triplet_loss",
    "MatchEntry",
    "MatchResult",
    "RenderMeta",
    "TemplateDB",
    "TemplateRecord",
    "acc15",
    "build_db",
    "db_from_tpdb",
    "match",
    "mean_pose_error",
    "rank_correlation_diag",
    "tpdb_from_db",
    "SimilarityReport",
    "occlusion_map",
    "sim_masked",
    "sim_occlusion_aware",
    "SynthObject",
    "apply_occlusion",
    "randomize_background",
    "render_synth",
    "LinearEmbedding",
    "MlpEmbedding",
    "TrainConfig",
    "TrainPair",
    "TrainResult",
    "embed",
    "sample_batch",
    "train_demo",
    "train_step",
    "BBox",
    "Intrinsics",
    "estimate_translation",
    "estimate_z",
    "Viewpoint",
    "enumerate_viewpoints",
    "hemisphere_filter",
    "icosphere_vertices",
    "pose_error_deg",
    "symmetric_pose_error_deg",
    "viewpoint_grid",
    "viewpoint_to_rotation",
    "__version__",
]
