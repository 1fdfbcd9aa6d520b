"""Shared test helpers: random inputs and independent scalar oracles.

The oracles deliberately avoid the library's vectorized code paths: plain
Python loops over cells and channels, so they stay independent of what they
check.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from gridpose.grids import BinaryMask, FeatureGrid


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_grid(rng, h, w, c, dtype=np.float64) -> FeatureGrid:
    return FeatureGrid(rng.standard_normal((h, w, c)).astype(dtype))


def random_mask(rng, h, w, fill=0.5) -> BinaryMask:
    cells = (rng.random((h, w)) < fill).astype(np.uint8)
    if not cells.any():
        cells[int(rng.integers(h)), int(rng.integers(w))] = 1
    return BinaryMask(cells)


def oracle_cell_cosine(q_cell, t_cell) -> float:
    qn = math.sqrt(sum(float(x) * float(x) for x in q_cell))
    tn = math.sqrt(sum(float(x) * float(x) for x in t_cell))
    if qn < 1e-12 or tn < 1e-12:
        return 0.0
    dot = sum(float(a) * float(b) for a, b in zip(q_cell, t_cell))
    return dot / (qn * tn)


def oracle_sim_score(q_data, t_data, mask_cells, delta=None) -> float:
    """Scalar triple-loop masked similarity; delta=None disables the
    occlusion threshold."""
    h, w, _ = q_data.shape
    total = 0.0
    popcount = 0
    for r in range(h):
        for col in range(w):
            if mask_cells[r, col]:
                popcount += 1
                s = oracle_cell_cosine(q_data[r, col], t_data[r, col])
                if delta is None or s > delta:
                    total += s
    return total / popcount


def central_difference(fn, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over a flat copy of
    x0, element by element."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    base = x0.copy().reshape(-1)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        fp = fn(base.reshape(x0.shape))
        base[i] = orig - h
        fm = fn(base.reshape(x0.shape))
        base[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise relative error with the denominator floored at 1e-6.

    Central differences at h = 1e-5 carry ~1e-10 absolute noise from loss
    round-off, so entries below the floor (softmax tails reach e^-20) are
    compared absolutely instead of relatively.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    denom = np.where(scale < 1e-6, 1.0, scale)
    return float((np.abs(analytic - numeric) / denom).max())


@pytest.fixture
def rng():
    return make_rng(20240817)


# One line per acceptance criterion, echoed in the terminal summary so the
# PASS/FAIL verdicts are visible without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
