import math

import numpy as np
import pytest

from gridpose.errors import DimensionError, EmptyMaskError, ParameterError
from gridpose.grids import BinaryMask, FeatureGrid, SimMap
from gridpose.similarity import occlusion_map, sim_masked, sim_occlusion_aware

from conftest import oracle_sim_score, random_grid, random_mask


def grid_of_cells(cells, h, w):
    """Tile explicit per-cell vectors into an (h, w, C) grid."""
    arr = np.array(cells, dtype=np.float64).reshape(h, w, -1)
    return FeatureGrid(arr)


class TestSimMasked:
    def test_identical_full_mask(self, rng):
        g = random_grid(rng, 5, 5, 4)
        report = sim_masked(g, g, BinaryMask.full(5, 5))
        assert report.score == pytest.approx(1.0, abs=1e-12)
        assert report.occlusion_map.popcount == 25

    def test_constant_half_similarity(self):
        # Every cell pair has cosine exactly 0.5; masking half the grid
        # still averages to 0.5.
        q = grid_of_cells([[1.0, 0.0]] * 4, 2, 2)
        t = grid_of_cells([[0.5, math.sqrt(3) / 2]] * 4, 2, 2)
        mask = BinaryMask(np.array([[1, 1], [0, 0]], dtype=np.uint8))
        report = sim_masked(q, t, mask)
        assert report.score == pytest.approx(0.5, abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(20):
            q = random_grid(rng, 5, 5, 4)
            t = random_grid(rng, 5, 5, 4)
            m = random_mask(rng, 5, 5)
            report = sim_masked(q, t, m)
            assert report.score == pytest.approx(
                oracle_sim_score(q.data, t.data, m.cells), abs=1e-6
            )

    def test_empty_mask_raises(self, rng):
        g = random_grid(rng, 2, 2, 3)
        with pytest.raises(EmptyMaskError):
            sim_masked(g, g, BinaryMask(np.zeros((2, 2), dtype=np.uint8)))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            sim_masked(random_grid(rng, 2, 2, 3), random_grid(rng, 2, 2, 4),
                       BinaryMask.full(2, 2))

    def test_report_invariant(self, rng):
        q = random_grid(rng, 4, 4, 3)
        t = random_grid(rng, 4, 4, 3)
        m = random_mask(rng, 4, 4)
        report = sim_masked(q, t, m)
        assert report.score == pytest.approx(report.recompute_score(m), abs=1e-9)


class TestOcclusionMap:
    def test_delta_minus_one_all_on_unless_exactly_minus_one(self):
        s = SimMap(np.array([[0.2, -1.0], [0.9, -0.3]]))
        occ = occlusion_map(s, -1.0)
        assert np.array_equal(occ.cells, [[1, 0], [1, 1]])

    def test_default_threshold(self):
        s = SimMap(np.array([[0.1, 0.3]]))
        occ = occlusion_map(s, 0.2)
        assert np.array_equal(occ.cells, [[0, 1]])

    def test_delta_one_all_off(self, rng):
        s = SimMap(np.clip(rng.uniform(-1, 1, (3, 3)), -1, 1))
        assert occlusion_map(s, 1.0).popcount == 0

    def test_strict_inequality_at_threshold(self):
        s = SimMap(np.array([[0.2]]))
        assert occlusion_map(s, 0.2).popcount == 0

    def test_delta_out_of_range(self):
        with pytest.raises(ParameterError):
            occlusion_map(SimMap(np.array([[0.0]])), 1.5)


class TestSimOcclusionAware:
    def test_low_delta_equals_masked(self, rng):
        q = random_grid(rng, 4, 4, 3)
        t = random_grid(rng, 4, 4, 3)
        m = random_mask(rng, 4, 4)
        plain = sim_masked(q, t, m)
        occ = sim_occlusion_aware(q, t, m, delta=-1.0)
        assert occ.score == plain.score  # no cell cosine equals exactly -1

    def test_forced_arithmetic(self):
        # Four cells with similarities [1, 1, -0.5, 1]; delta 0.2 turns off
        # the third: (1 + 1 + 0 + 1) / 4.
        q = grid_of_cells([[1.0, 0.0]] * 4, 2, 2)
        t_cells = [[1.0, 0.0], [1.0, 0.0], [-0.5, math.sqrt(3) / 2], [1.0, 0.0]]
        t = grid_of_cells(t_cells, 2, 2)
        report = sim_occlusion_aware(q, t, BinaryMask.full(2, 2), delta=0.2)
        assert report.score == pytest.approx(0.75, abs=1e-12)
        assert np.array_equal(report.occlusion_map.cells, [[1, 1], [0, 1]])

    def test_matches_scalar_oracle(self, rng):
        for _ in range(20):
            q = random_grid(rng, 5, 5, 4)
            t = random_grid(rng, 5, 5, 4)
            m = random_mask(rng, 5, 5)
            delta = float(rng.uniform(-1, 1))
            report = sim_occlusion_aware(q, t, m, delta)
            assert report.score == pytest.approx(
                oracle_sim_score(q.data, t.data, m.cells, delta=delta), abs=1e-6
            )

    def test_monotone_non_increasing_in_delta_for_nonnegative_sims(self, rng):
        # With every per-cell similarity >= 0, raising delta can only remove
        # non-negative contributions.
        base = random_grid(rng, 4, 4, 3)
        noisy = FeatureGrid(base.data + 0.1 * rng.standard_normal(base.data.shape))
        m = random_mask(rng, 4, 4)
        report = sim_masked(base, noisy, m)
        assert report.sim_map.values.min() >= 0.0
        deltas = np.linspace(-1.0, 1.0, 21)
        scores = [sim_occlusion_aware(base, noisy, m, float(d)).score for d in deltas]
        assert all(a >= b - 1e-12 for a, b in zip(scores, scores[1:]))

    def test_score_bounded(self, rng):
        for _ in range(10):
            q = random_grid(rng, 3, 3, 2)
            t = random_grid(rng, 3, 3, 2)
            m = random_mask(rng, 3, 3)
            assert abs(sim_occlusion_aware(q, t, m, 0.0).score) <= 1.0
            assert abs(sim_masked(q, t, m).score) <= 1.0

    def test_masked_out_padding_never_changes_score(self, rng):
        q = random_grid(rng, 3, 3, 4)
        t = random_grid(rng, 3, 3, 4)
        m = random_mask(rng, 3, 3)
        before = sim_occlusion_aware(q, t, m, 0.2).score

        pad_q = np.concatenate([q.data, rng.standard_normal((1, 3, 4))], axis=0)
        pad_t = np.concatenate([t.data, rng.standard_normal((1, 3, 4))], axis=0)
        pad_m = np.concatenate([m.cells, np.zeros((1, 3), dtype=np.uint8)], axis=0)
        after = sim_occlusion_aware(
            FeatureGrid(pad_q), FeatureGrid(pad_t), BinaryMask(pad_m), 0.2
        ).score
        assert after == pytest.approx(before, abs=1e-12)

    def test_report_invariant(self, rng):
        q = random_grid(rng, 4, 4, 3)
        t = random_grid(rng, 4, 4, 3)
        m = random_mask(rng, 4, 4)
        report = sim_occlusion_aware(q, t, m, 0.2)
        assert report.score == pytest.approx(report.recompute_score(m), abs=1e-9)

    def test_renormalized_mode(self):
        q = grid_of_cells([[1.0, 0.0]] * 4, 2, 2)
        t_cells = [[1.0, 0.0], [1.0, 0.0], [-0.5, math.sqrt(3) / 2], [1.0, 0.0]]
        t = grid_of_cells(t_cells, 2, 2)
        report = sim_occlusion_aware(q, t, BinaryMask.full(2, 2), 0.2, renormalize=True)
        assert report.score == pytest.approx(1.0, abs=1e-12)  # 3 surviving ones
