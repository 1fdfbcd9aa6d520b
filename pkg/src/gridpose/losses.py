"""Contrastive training objectives and their analytic gradients.

A batch holds N query/template pairs; the N x N similarity matrix has the
positives on its diagonal and negatives everywhere else. The noise-
contrastive loss is the default objective; the classic triplet and pairwise
terms are provided for comparison runs.

Two alternative formulations are kept available behind flags, off by
default: a denominator that excludes the positive term (which makes the loss
unbounded below) and a triplet ratio with the positive distance in the
numerator (which assigns loss 1 to a perfect positive pair).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchContractError, DimensionError, ParameterError
from .grids import ZERO_CELL_EPS, BinaryMask, FeatureGrid
from .viewsphere import Viewpoint, pose_error_deg

DEFAULT_TAU = 0.1
DEFAULT_POSITIVE_ANGLE_DEG = 5.0


@dataclass(frozen=True)
class PairLabel:
    """Identity and pose of one sample, used to decide positive vs negative."""

    object_id: int
    viewpoint: Viewpoint

    def __post_init__(self) -> None:
        if int(self.object_id) < 0:
            raise ParameterError(f"object_id must be >= 0, got {self.object_id}")
        object.__setattr__(self, "object_id", int(self.object_id))


def is_positive_pair(
    a: PairLabel, b: PairLabel, angle_thresh_deg: float = DEFAULT_POSITIVE_ANGLE_DEG
) -> bool:
    """True iff both samples show the same object from directions strictly
    less than `angle_thresh_deg` apart. Different objects, or the same object
    at a dissimilar pose, are negatives."""
    if a.object_id != b.object_id:
        return False
    return pose_error_deg(a.viewpoint, b.viewpoint) < angle_thresh_deg


def check_mutually_negative(
    labels, angle_thresh_deg: float = DEFAULT_POSITIVE_ANGLE_DEG
) -> None:
    """Enforce the batch sampling contract: no two distinct pairs in a batch
    may be positives of each other, so every off-diagonal similarity is a
    true negative."""
    labels = list(labels)
    for i in range(len(labels)):
        for k in range(i + 1, len(labels)):
            if is_positive_pair(labels[i], labels[k], angle_thresh_deg):
                raise BatchContractError(
                    f"batch entries {i} and {k} are mutually positive "
                    f"(object {labels[i].object_id}); resample the batch"
                )


def _check_sim_matrix(s: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0.0 or not np.isfinite(tau):
        raise ParameterError(f"temperature must be positive, got {tau!r}")
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise BatchContractError(f"need at least 2 pairs, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("similarity matrix contains non-finite values")
    return arr


def infonce_loss(
    s: np.ndarray,
    tau: float = DEFAULT_TAU,
    denominator_includes_positive: bool = True,
) -> float:
    """Noise-contrastive loss over an N x N similarity matrix whose diagonal
    holds the positives.

    L = -sum_i log( exp(s_ii / tau) / sum_k exp(s_ik / tau) ), evaluated with
    a max-shifted log-sum-exp (s/tau reaches exp(10) at tau = 0.1). With the
    flag off, k skips the diagonal; that variant is unbounded below and is
    kept for comparison runs only.
    """
    z = _check_sim_matrix(s, tau) / tau
    n = z.shape[0]
    if denominator_includes_positive:
        zd = z
    else:
        zd = z.copy()
        np.fill_diagonal(zd, -np.inf)
    m = zd.max(axis=1)
    lse = m + np.log(np.exp(zd - m[:, None]).sum(axis=1))
    return float((lse - z[np.arange(n), np.arange(n)]).sum())


def infonce_grad_sim(
    s: np.ndarray,
    tau: float = DEFAULT_TAU,
    denominator_includes_positive: bool = True,
) -> np.ndarray:
    """Gradient of infonce_loss with respect to every similarity entry.

    Default mode: dL/ds_ik = (softmax_row_i(s / tau)_k - [k == i]) / tau, so
    every row sums to zero. Literal mode: the softmax runs over the
    off-diagonal entries only and the diagonal gradient is -1/tau.
    """
    z = _check_sim_matrix(s, tau) / tau
    n = z.shape[0]
    if denominator_includes_positive:
        zd = z
    else:
        zd = z.copy()
        np.fill_diagonal(zd, -np.inf)
    m = zd.max(axis=1, keepdims=True)
    e = np.exp(zd - m)
    p = e / e.sum(axis=1, keepdims=True)
    grad = p / tau
    grad[np.arange(n), np.arange(n)] -= 1.0 / tau
    return grad


def masked_sim_matrix(
    q_units: np.ndarray, t_units: np.ndarray, mask_weights: np.ndarray
) -> np.ndarray:
    """s_ik = sum_l w_k[l] * (q_i[l] . t_k[l]) for unit-cell stacks of shape
    (N, L, C) and per-template cell weights (N, L)."""
    cell_dots = np.einsum("ilc,klc->ikl", q_units, t_units, optimize=True)
    return np.einsum("ikl,kl->ik", cell_dots, mask_weights)


@dataclass
class FeatureGradients:
    """Loss value and exact gradients with respect to every raw feature cell.

    zero_cell_count flags how many masked zero-norm cells were met; their
    gradient is defined as zero (subgradient choice).
    """

    loss: float
    sim_matrix: np.ndarray
    query_grads: list[np.ndarray] = field(default_factory=list)
    template_grads: list[np.ndarray] = field(default_factory=list)
    zero_cell_count: int = 0


def _unit_and_norms(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(data, dtype=np.float64)
    norms = np.sqrt(np.einsum("hwc,hwc->hw", arr, arr))
    safe = np.where(norms < ZERO_CELL_EPS, 1.0, norms)
    units = arr / safe[..., None]
    units[norms < ZERO_CELL_EPS] = 0.0
    return units, norms


def _chain_through_normalization(
    grad_units: np.ndarray, units: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    # d(x/|x|)/dx = (I - u u^T) / |x|; undefined at zero cells, where the
    # gradient is pinned to zero.
    proj = grad_units - units * np.einsum("hwc,hwc->hw", units, grad_units)[..., None]
    safe = np.where(norms < ZERO_CELL_EPS, 1.0, norms)
    out = proj / safe[..., None]
    out[norms < ZERO_CELL_EPS] = 0.0
    return out


def loss_grad_features(
    q_batch,
    t_batch,
    masks,
    tau: float = DEFAULT_TAU,
    denominator_includes_positive: bool = True,
) -> FeatureGradients:
    """Exact gradient of the contrastive loss with respect to every raw cell
    of every grid in the batch.

    Entry (i, k) of the similarity matrix scores query i against template k
    under template k's visibility mask. Grids may be raw: cells are
    normalized internally and the normalization Jacobian is part of the
    chain. Cells outside every mask get an exactly zero gradient.
    """
    q_batch = list(q_batch)
    t_batch = list(t_batch)
    masks = list(masks)
    n = len(q_batch)
    if not (len(t_batch) == len(masks) == n):
        raise DimensionError(
            f"batch lists must have equal length, got {n}, {len(t_batch)}, {len(masks)}"
        )
    if n < 2:
        raise BatchContractError(f"need at least 2 pairs, got {n}")
    shape = q_batch[0].shape
    for g in (*q_batch, *t_batch):
        if not isinstance(g, FeatureGrid):
            raise ParameterError("batch entries must be FeatureGrid instances")
        if g.shape != shape:
            raise DimensionError(f"all grids in a batch must share shape {shape}, got {g.shape}")
    for m in masks:
        if not isinstance(m, BinaryMask):
            raise ParameterError("masks must be BinaryMask instances")
        if (m.height, m.width) != shape[:2]:
            raise DimensionError("mask shape does not match the batch grids")
        if m.popcount < 1:
            raise ParameterError("every template mask needs at least one foreground cell")

    h, w, c = shape
    q_units = np.empty((n, h, w, c))
    t_units = np.empty((n, h, w, c))
    q_norms = np.empty((n, h, w))
    t_norms = np.empty((n, h, w))
    for i in range(n):
        q_units[i], q_norms[i] = _unit_and_norms(q_batch[i].data)
        t_units[i], t_norms[i] = _unit_and_norms(t_batch[i].data)

    mask_weights = np.stack(
        [m.cells.astype(np.float64) / m.popcount for m in masks]
    )  # (N, H, W)

    qf = q_units.reshape(n, h * w, c)
    tf = t_units.reshape(n, h * w, c)
    wf = mask_weights.reshape(n, h * w)

    s = masked_sim_matrix(qf, tf, wf)
    loss = infonce_loss(s, tau, denominator_includes_positive)
    g = infonce_grad_sim(s, tau, denominator_includes_positive)

    # dL/d q_unit_i[l] = sum_k g_ik w_k[l] t_unit_k[l]
    dq_units = np.einsum("ik,kl,klc->ilc", g, wf, tf, optimize=True).reshape(n, h, w, c)
    # dL/d t_unit_k[l] = w_k[l] sum_i g_ik q_unit_i[l]
    dt_units = (np.einsum("ik,ilc->klc", g, qf, optimize=True) * wf[..., None]).reshape(
        n, h, w, c
    )

    participates_q = (np.stack([m.cells for m in masks]).sum(axis=0) > 0)  # any template mask
    zero_cells = 0
    query_grads: list[np.ndarray] = []
    template_grads: list[np.ndarray] = []
    for i in range(n):
        zero_cells += int(((q_norms[i] < ZERO_CELL_EPS) & participates_q).sum())
        zero_cells += int(((t_norms[i] < ZERO_CELL_EPS) & (masks[i].cells > 0)).sum())
        query_grads.append(_chain_through_normalization(dq_units[i], q_units[i], q_norms[i]))
        template_grads.append(_chain_through_normalization(dt_units[i], t_units[i], t_norms[i]))

    return FeatureGradients(
        loss=loss,
        sim_matrix=s,
        query_grads=query_grads,
        template_grads=template_grads,
        zero_cell_count=zero_cells,
    )


def triplet_loss(
    d_pos: float, d_neg: float, margin: float, wohlhart_semantics: bool = True
) -> float:
    """Ratio triplet term over a positive-pair and a negative-pair distance.

    Default semantics put the negative distance in the numerator,
    max(0, 1 - d_neg / (d_pos + margin)), so the loss vanishes once the
    negative is pushed far enough away. The inverted ratio,
    max(0, 1 - d_pos / (d_neg + margin)), is kept behind the flag; it
    assigns loss 1 to a perfectly matched positive pair.
    """
    d_pos = float(d_pos)
    d_neg = float(d_neg)
    margin = float(margin)
    if d_pos < 0.0 or d_neg < 0.0:
        raise ParameterError("distances must be non-negative")
    if margin <= 0.0:
        raise ParameterError(f"margin must be positive, got {margin!r}")
    if wohlhart_semantics:
        return max(0.0, 1.0 - d_neg / (d_pos + margin))
    return max(0.0, 1.0 - d_pos / (d_neg + margin))


def pairwise_loss(d_pos_list) -> float:
    """Sum of positive-pair distances; pulls matching views together."""
    arr = np.asarray(list(d_pos_list), dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or not np.all(np.isfinite(arr))):
        raise ParameterError("positive-pair distances must be finite and non-negative")
    return float(arr.sum())
