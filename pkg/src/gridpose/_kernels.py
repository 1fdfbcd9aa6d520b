"""Fused template-scoring kernels.

One query against T templates is a single pass per template: mask test,
C-length dot product, occlusion threshold, accumulate, divide by the mask
popcount. No per-cell similarity map is materialized.

Two backends produce the same scores (cell dots and accumulation both in
float64):

* "numba": jitted serial and parallel scans. The parallel scan writes each
  template's score independently, so rankings are identical for any thread
  count.
* "numpy": chunked vectorized fallback; trades temporary memory for speed
  and ignores the thread cap (BLAS threading is external).

The backend is chosen at import time from the GRIDPOSE_BACKEND environment
variable ("numba" or "numpy"); default is numba when importable.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

BACKEND_ENV_VAR = "GRIDPOSE_BACKEND"

_NUMPY_CHUNK = 2048


def _resolve_backend() -> str:
    choice = os.environ.get(BACKEND_ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"{BACKEND_ENV_VAR} must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        with warnings.catch_warnings():
            # An outdated TBB merely disables one threading layer.
            warnings.filterwarnings("ignore", message=".*TBB.*")
            import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


ACTIVE_BACKEND = _resolve_backend()


def score_templates_numpy(
    feats: np.ndarray,
    masks: np.ndarray,
    pops: np.ndarray,
    query: np.ndarray,
    delta: float,
    use_occlusion: bool,
    threads: int = 1,
) -> np.ndarray:
    """Vectorized scan. feats: (T, L, C) float32, masks: (T, L) uint8,
    pops: (T,) int64, query: (L, C) float64 unit cells. Returns (T,) float64."""
    t_total = feats.shape[0]
    out = np.empty(t_total, dtype=np.float64)
    for start in range(0, t_total, _NUMPY_CHUNK):
        stop = min(start + _NUMPY_CHUNK, t_total)
        # Mixed f32/f64 einsum promotes to float64 without copying the arena.
        dots = np.einsum("tlc,lc->tl", feats[start:stop], query)
        keep = masks[start:stop].astype(bool)
        if use_occlusion:
            keep &= dots > delta
        out[start:stop] = np.where(keep, dots, 0.0).sum(axis=1) / pops[start:stop]
    return out


if ACTIVE_BACKEND == "numba":
    with warnings.catch_warnings():
        # Loading the threading layer repeats the TBB-version complaint.
        warnings.filterwarnings("ignore", message=".*TBB.*")
        import numba
        from numba import njit, prange

        _MAX_THREADS = int(numba.get_num_threads())

    @njit(cache=True)
    def _scan_serial(feats, masks, pops, query, delta, use_occlusion, out):
        t_total, n_cells, n_channels = feats.shape
        for t in range(t_total):
            acc = 0.0
            for l in range(n_cells):
                if masks[t, l]:
                    d = 0.0
                    for c in range(n_channels):
                        d += np.float64(feats[t, l, c]) * query[l, c]
                    if not use_occlusion or d > delta:
                        acc += d
            out[t] = acc / pops[t]

    @njit(cache=True, parallel=True)
    def _scan_parallel(feats, masks, pops, query, delta, use_occlusion, out):
        t_total, n_cells, n_channels = feats.shape
        for t in prange(t_total):
            acc = 0.0
            for l in range(n_cells):
                if masks[t, l]:
                    d = 0.0
                    for c in range(n_channels):
                        d += np.float64(feats[t, l, c]) * query[l, c]
                    if not use_occlusion or d > delta:
                        acc += d
            out[t] = acc / pops[t]

    def score_templates_numba(
        feats: np.ndarray,
        masks: np.ndarray,
        pops: np.ndarray,
        query: np.ndarray,
        delta: float,
        use_occlusion: bool,
        threads: int = 1,
    ) -> np.ndarray:
        out = np.empty(feats.shape[0], dtype=np.float64)
        if threads <= 1:
            _scan_serial(feats, masks, pops, query, float(delta), bool(use_occlusion), out)
        else:
            numba.set_num_threads(min(int(threads), _MAX_THREADS))
            _scan_parallel(feats, masks, pops, query, float(delta), bool(use_occlusion), out)
        return out

    _IMPLEMENTATIONS = {"numba": score_templates_numba, "numpy": score_templates_numpy}
else:
    _IMPLEMENTATIONS = {"numpy": score_templates_numpy}


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLEMENTATIONS))


def score_templates(
    feats: np.ndarray,
    masks: np.ndarray,
    pops: np.ndarray,
    query: np.ndarray,
    delta: float,
    use_occlusion: bool,
    threads: int = 1,
    backend: str | None = None,
) -> np.ndarray:
    """Score every template against one query; see the module docstring for
    the layout contract. `backend` overrides the import-time choice."""
    name = ACTIVE_BACKEND if backend is None else backend
    try:
        impl = _IMPLEMENTATIONS[name]
    except KeyError:
        raise ValueError(
            f"backend {name!r} not available; choose from {available_backends()}"
        ) from None
    return impl(feats, masks, pops, query, delta, use_occlusion, threads)
