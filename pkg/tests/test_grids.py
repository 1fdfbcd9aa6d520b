import numpy as np
import pytest

from gridpose.errors import DimensionError, ValidationError
from gridpose.grids import BinaryMask, FeatureGrid, SimMap, local_cosine, normalize_cells

from conftest import oracle_cell_cosine, random_grid


class TestFeatureGrid:
    def test_rejects_non_finite(self):
        data = np.zeros((2, 2, 3))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            FeatureGrid(data)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValidationError):
            FeatureGrid(np.zeros((2, 2)))

    def test_cells_view_is_row_major(self):
        g = FeatureGrid(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        cells = g.cells()
        assert cells.shape == (6, 4)
        assert np.array_equal(cells[1], g.data[0, 1])


class TestBinaryMask:
    def test_popcount_cached(self):
        m = BinaryMask(np.array([[1, 0], [1, 1]], dtype=np.uint8))
        assert m.popcount == 3

    def test_rejects_other_values(self):
        with pytest.raises(ValidationError):
            BinaryMask(np.array([[0, 2]], dtype=np.uint8))

    def test_accepts_bool(self):
        m = BinaryMask(np.array([[True, False]]))
        assert m.popcount == 1


class TestSimMap:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            SimMap(np.array([[1.5]]))


class TestNormalizeCells:
    def test_three_four_five(self):
        g = FeatureGrid(np.array([[[3.0, 4.0]]]))
        out = normalize_cells(g)
        assert np.allclose(out.data[0, 0], [0.6, 0.8])

    def test_zero_cell_stays_zero(self):
        g = FeatureGrid(np.zeros((1, 1, 3)))
        out = normalize_cells(g)
        assert np.array_equal(out.data, np.zeros((1, 1, 3)))

    def test_random_grid_norms(self, rng):
        g = random_grid(rng, 6, 5, 4)
        out = normalize_cells(g)
        norms = np.linalg.norm(out.cells(), axis=1)
        assert np.all((norms == 0.0) | (np.abs(norms - 1.0) <= 1e-6))

    def test_preserves_dtype(self, rng):
        g = random_grid(rng, 2, 2, 3, dtype=np.float32)
        assert normalize_cells(g).data.dtype == np.float32


class TestLocalCosine:
    def test_self_similarity_is_one(self, rng):
        g = random_grid(rng, 4, 4, 3)
        s = local_cosine(g, g)
        assert np.allclose(s.values, 1.0, atol=1e-12)

    def test_orthogonal_cells(self):
        q = FeatureGrid(np.array([[[1.0, 0.0]]]))
        t = FeatureGrid(np.array([[[0.0, 1.0]]]))
        assert local_cosine(q, t).values[0, 0] == 0.0

    def test_matches_scalar_oracle(self, rng):
        q = random_grid(rng, 4, 4, 3)
        t = random_grid(rng, 4, 4, 3)
        s = local_cosine(q, t)
        for r in range(4):
            for c in range(4):
                expected = oracle_cell_cosine(q.data[r, c], t.data[r, c])
                assert s.values[r, c] == pytest.approx(expected, abs=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            local_cosine(random_grid(rng, 2, 2, 3), random_grid(rng, 2, 3, 3))

    def test_symmetric(self, rng):
        q = random_grid(rng, 3, 5, 4)
        t = random_grid(rng, 3, 5, 4)
        assert np.allclose(local_cosine(q, t).values, local_cosine(t, q).values)

    def test_positive_scale_invariance(self, rng):
        q = random_grid(rng, 3, 3, 4)
        t = random_grid(rng, 3, 3, 4)
        scaled = q.data.copy()
        scaled[1, 2] *= 37.5
        s1 = local_cosine(q, t).values
        s2 = local_cosine(FeatureGrid(scaled), t).values
        assert np.abs(s1 - s2).max() <= 1e-6

    def test_zero_cell_scores_zero(self, rng):
        q_data = random_grid(rng, 2, 2, 3).data.copy()
        q_data[0, 1] = 0.0
        t = random_grid(rng, 2, 2, 3)
        s = local_cosine(FeatureGrid(q_data), t)
        assert s.values[0, 1] == 0.0
