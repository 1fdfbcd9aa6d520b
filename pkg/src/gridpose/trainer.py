"""Desk-scale trainable embedding.

The learnable map is a per-cell linear layer (optionally two layers with a
tanh between, off by default) applied identically at every grid location,
trained with full-batch gradient descent on the contrastive loss. Features
are never normalized inside the embedding; normalization happens at
similarity time only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError
from .grids import BinaryMask, FeatureGrid
from .losses import (
    DEFAULT_POSITIVE_ANGLE_DEG,
    DEFAULT_TAU,
    PairLabel,
    check_mutually_negative,
    is_positive_pair,
    loss_grad_features,
)
from .synthlab import SynthObject, render_synth
from .viewsphere import Viewpoint

DEFAULT_EMBED_CHANNELS = 16


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class LinearEmbedding:
    """Per-cell affine map: cell -> weight @ cell + bias."""

    weight: np.ndarray  # (c_out, c_in)
    bias: np.ndarray    # (c_out,)

    def __post_init__(self) -> None:
        w = _check_finite("weight", self.weight)
        b = _check_finite("bias", self.bias)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValidationError(f"weight must be (c_out, c_in) with c_out >= 1, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValidationError(f"bias shape {b.shape} does not match weight {w.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "LinearEmbedding":
        return cls(np.eye(channels), np.zeros(channels))

    @classmethod
    def seeded(
        cls, c_in: int, c_out: int = DEFAULT_EMBED_CHANNELS, seed: int = 0
    ) -> "LinearEmbedding":
        """Random orthonormal initialization: a cell-wise isometry when
        c_out >= c_in (cosines preserved at step 0), an orthonormal
        projection otherwise."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        size = max(c_in, c_out)
        q, _ = np.linalg.qr(rng.standard_normal((size, size)))
        return cls(np.ascontiguousarray(q[:c_out, :c_in]), np.zeros(c_out))


@dataclass(frozen=True, eq=False)
class MlpEmbedding:
    """Two per-cell affine maps with a tanh between; the optional deeper
    variant."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        w1 = _check_finite("w1", self.w1)
        b1 = _check_finite("b1", self.b1)
        w2 = _check_finite("w2", self.w2)
        b2 = _check_finite("b2", self.b2)
        if w1.ndim != 2 or w2.ndim != 2 or w2.shape[1] != w1.shape[0]:
            raise ValidationError("layer shapes are inconsistent")
        if b1.shape != (w1.shape[0],) or b2.shape != (w2.shape[0],):
            raise ValidationError("bias shapes do not match the weights")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, arr)

    @property
    def c_in(self) -> int:
        return self.w1.shape[1]

    @property
    def c_out(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def seeded(
        cls,
        c_in: int,
        c_out: int = DEFAULT_EMBED_CHANNELS,
        hidden: int | None = None,
        seed: int = 0,
    ) -> "MlpEmbedding":
        hidden = c_out if hidden is None else int(hidden)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
        return cls(
            rng.standard_normal((hidden, c_in)) / math.sqrt(c_in),
            np.zeros(hidden),
            rng.standard_normal((c_out, hidden)) / math.sqrt(hidden),
            np.zeros(c_out),
        )


Embedding = LinearEmbedding | MlpEmbedding


def embed(raw: FeatureGrid, e: Embedding) -> FeatureGrid:
    """Apply the per-cell map to every cell of a raw grid."""
    if raw.channels != e.c_in:
        raise DimensionError(f"grid has {raw.channels} channels, embedding expects {e.c_in}")
    cells = raw.cells().astype(np.float64)
    if isinstance(e, LinearEmbedding):
        out = cells @ e.weight.T + e.bias
    else:
        hidden = np.tanh(cells @ e.w1.T + e.b1)
        out = hidden @ e.w2.T + e.b2
    return FeatureGrid(out.reshape(raw.height, raw.width, e.c_out))


@dataclass(frozen=True)
class TrainConfig:
    batch_pairs: int = 4
    learning_rate: float = 0.1
    steps: int = 200
    tau: float = DEFAULT_TAU
    seed: int = 0
    angle_thresh_deg: float = DEFAULT_POSITIVE_ANGLE_DEG
    two_layer: bool = False

    def __post_init__(self) -> None:
        if self.batch_pairs < 2:
            raise ParameterError(f"batch_pairs must be >= 2, got {self.batch_pairs}")
        if self.learning_rate < 0.0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.tau <= 0.0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class TrainPair:
    """One positive pair: a noisy query grid and a clean template of the same
    object in a nearby pose, with the template's mask and pose label."""

    raw_query: FeatureGrid
    raw_template: FeatureGrid
    mask: BinaryMask
    label: PairLabel


def _stacked_cells(grids: list[FeatureGrid]) -> np.ndarray:
    return np.concatenate([g.cells() for g in grids], axis=0).astype(np.float64)


def train_step(batch, e: Embedding, config: TrainConfig) -> tuple[Embedding, float]:
    """One full-batch gradient-descent update.

    Returns the updated embedding and the pre-update loss. The batch must
    satisfy the mutually-negative contract; violations raise
    BatchContractError. Deterministic for fixed inputs.
    """
    batch = list(batch)
    check_mutually_negative([p.label for p in batch], config.angle_thresh_deg)

    raw_q = [p.raw_query for p in batch]
    raw_t = [p.raw_template for p in batch]
    masks = [p.mask for p in batch]
    emb_q = [embed(g, e) for g in raw_q]
    emb_t = [embed(g, e) for g in raw_t]

    grads = loss_grad_features(emb_q, emb_t, masks, tau=config.tau)

    # Accumulation order is fixed: all query grids, then all template grids.
    x = _stacked_cells(raw_q + raw_t)                       # (M, c_in)
    gy = np.concatenate(
        [g.reshape(-1, e.c_out) for g in grads.query_grads + grads.template_grads], axis=0
    )                                                        # (M, c_out)

    lr = config.learning_rate
    if isinstance(e, LinearEmbedding):
        new_e: Embedding = LinearEmbedding(
            e.weight - lr * (gy.T @ x), e.bias - lr * gy.sum(axis=0)
        )
    else:
        hidden = np.tanh(x @ e.w1.T + e.b1)                  # (M, hidden)
        gh = (gy @ e.w2) * (1.0 - hidden ** 2)
        new_e = MlpEmbedding(
            e.w1 - lr * (gh.T @ x),
            e.b1 - lr * gh.sum(axis=0),
            e.w2 - lr * (gy.T @ hidden),
            e.b2 - lr * gy.sum(axis=0),
        )
    return new_e, grads.loss


def perturb_direction(
    direction: np.ndarray, max_angle_deg: float, rng: np.random.Generator
) -> np.ndarray:
    angle = math.radians(rng.uniform(0.0, max_angle_deg))
    # Random unit vector orthogonal to the direction.
    v = rng.standard_normal(3)
    v -= direction * float(direction @ v)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return direction.copy()
    v /= norm
    return math.cos(angle) * direction + math.sin(angle) * v


def sample_batch(
    objects: list[SynthObject],
    viewpoints: list[Viewpoint],
    n_pairs: int,
    rng: np.random.Generator,
    noise_sigma: float,
    pose_jitter_deg: float = 3.0,
    allow_same_object: bool = False,
    angle_thresh_deg: float = DEFAULT_POSITIVE_ANGLE_DEG,
) -> list[TrainPair]:
    """Draw n_pairs positive pairs satisfying the mutually-negative contract.

    By default every pair uses a distinct object, which satisfies the
    contract by construction. With allow_same_object=True, pairs may share
    an object at a dissimilar pose (resampled until the pose gap clears the
    positive threshold), so the batch also contains same-object negatives.
    Each pair renders a clean template at a codebook viewpoint and a noisy
    query at a jittered pose within the positive-pair angle.
    """
    if allow_same_object:
        labels: list[PairLabel] = []
        picks: list[tuple[int, Viewpoint]] = []
        for _ in range(n_pairs):
            for _attempt in range(1000):
                obj_idx = int(rng.integers(len(objects)))
                vp = viewpoints[int(rng.integers(len(viewpoints)))]
                candidate = PairLabel(objects[obj_idx].object_id, vp)
                if all(
                    not is_positive_pair(candidate, other, angle_thresh_deg)
                    for other in labels
                ):
                    break
            else:
                raise ParameterError(
                    "could not sample a mutually negative batch; "
                    "codebook too small for this batch size"
                )
            labels.append(candidate)
            picks.append((obj_idx, vp))
    else:
        if n_pairs > len(objects):
            raise ParameterError(
                f"need at least {n_pairs} objects to sample {n_pairs} mutually "
                f"negative pairs on distinct objects"
            )
        chosen = rng.permutation(len(objects))[:n_pairs]
        picks = [
            (int(idx), viewpoints[int(rng.integers(len(viewpoints)))]) for idx in chosen
        ]

    batch = []
    for obj_idx, vp in picks:
        obj = objects[obj_idx]
        template, mask = render_synth(obj, vp, 0.0)
        qdir = perturb_direction(vp.direction, pose_jitter_deg, rng)
        qvp = Viewpoint.of(qdir, vp.inplane_deg)
        query, _ = render_synth(obj, qvp, noise_sigma, seed=int(rng.integers(2**63)))
        batch.append(
            TrainPair(raw_query=query, raw_template=template, mask=mask,
                      label=PairLabel(obj.object_id, vp))
        )
    return batch


@dataclass
class TrainResult:
    embedding: Embedding
    losses: list[float] = field(default_factory=list)


def train_demo(
    objects: list[SynthObject],
    viewpoints: list[Viewpoint],
    config: TrainConfig,
    noise_sigma: float = 0.1,
    c_out: int = DEFAULT_EMBED_CHANNELS,
) -> TrainResult:
    """Train an embedding from scratch on synthetic objects.

    Reproducible: the parameter trajectory is a pure function of the inputs
    and config.seed.
    """
    if not objects:
        raise ParameterError("need at least one object")
    c_in = objects[0].channels
    e: Embedding = (
        MlpEmbedding.seeded(c_in, c_out, seed=config.seed)
        if config.two_layer
        else LinearEmbedding.seeded(c_in, c_out, seed=config.seed)
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 3]))
    losses: list[float] = []
    for _ in range(config.steps):
        batch = sample_batch(objects, viewpoints, config.batch_pairs, rng, noise_sigma)
        e, loss = train_step(batch, e, config)
        losses.append(loss)
    return TrainResult(embedding=e, losses=losses)
