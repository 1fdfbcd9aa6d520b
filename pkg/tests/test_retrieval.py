import math

import numpy as np
import pytest

from gridpose.errors import (
    BuildError,
    DimensionError,
    InsufficientDataError,
    NotFoundError,
    ParameterError,
)
from gridpose.grids import BinaryMask, FeatureGrid, normalize_cells
from gridpose.retrieval import (
    RenderMeta,
    TemplateRecord,
    acc15,
    build_db,
    match,
    mean_pose_error,
    rank_correlation_diag,
)
from gridpose.similarity import sim_occlusion_aware
from gridpose.synthlab import SynthObject, render_synth
from gridpose.trainer import TrainConfig, embed, train_demo
from gridpose.viewsphere import (
    Viewpoint,
    enumerate_viewpoints,
    viewpoint_to_rotation,
)

from conftest import random_grid, random_mask


def meta() -> RenderMeta:
    return RenderMeta(1000.0, 50.0, 500.0, np.zeros(2))


def record_from(obj, vp, index, embedding=None) -> TemplateRecord:
    grid, mask = render_synth(obj, vp, 0.0)
    if embedding is not None:
        grid = embed(grid, embedding)
    return TemplateRecord(
        object_id=obj.object_id,
        template_index=index,
        viewpoint=vp,
        rotation=viewpoint_to_rotation(vp),
        features=normalize_cells(grid),
        mask=mask,
        render_meta=meta(),
    )


@pytest.fixture(scope="module")
def objects():
    return [SynthObject.create(i, 10, 10, 6, master_seed=31) for i in range(3)]


@pytest.fixture(scope="module")
def views():
    return enumerate_viewpoints(1, 0.0, 1)


@pytest.fixture(scope="module")
def db(objects, views):
    records = [
        record_from(obj, vp, i) for obj in objects for i, vp in enumerate(views)
    ]
    return build_db(records)


class TestBuildDb:
    def test_iteration_order_is_fixed(self, objects, views):
        records = []
        for obj in reversed(objects[:2]):
            for i, vp in enumerate(views[:3]):
                records.append(record_from(obj, vp, i))
        db = build_db(records)
        assert len(db) == 6
        assert [db.identity(i) for i in range(6)] == [
            (0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2),
        ]

    def test_mismatched_height_rejected(self, objects, views):
        a = record_from(objects[0], views[0], 0)
        other = SynthObject.create(1, 12, 10, 6, master_seed=31)
        b = record_from(other, views[1], 0)
        with pytest.raises(BuildError):
            build_db([a, b])

    def test_duplicate_index_rejected(self, objects, views):
        a = record_from(objects[0], views[0], 0)
        b = record_from(objects[0], views[1], 0)
        with pytest.raises(BuildError):
            build_db([a, b])

    def test_empty_rejected(self):
        with pytest.raises(BuildError):
            build_db([])

    def test_unnormalized_features_rejected(self, objects, views):
        grid, mask = render_synth(objects[0], views[0], 0.0)
        with pytest.raises(Exception):
            TemplateRecord(
                object_id=0,
                template_index=0,
                viewpoint=views[0],
                rotation=viewpoint_to_rotation(views[0]),
                features=FeatureGrid(grid.data * 3.0),
                mask=mask,
                render_meta=meta(),
            )


class TestMatch:
    def test_own_template_ranks_first_with_score_one(self, db):
        query = db.features_at(17)
        result = match(query, db, k=3)
        oid, tidx = db.identity(17)
        assert result.best.object_id == oid
        assert result.best.template_index == tidx
        assert result.best.score == pytest.approx(1.0, abs=1e-6)

    def test_clean_render_at_codebook_viewpoint_retrieves_itself(self, db, objects, views):
        # A fresh noise-free render of a codebook view (float64, not the
        # stored float32 row) must still come back rank 1 at score ~1.
        obj = objects[2]
        index = 7
        grid, _ = render_synth(obj, views[index], 0.0)
        result = match(grid, db, k=1)
        assert result.best.object_id == obj.object_id
        assert result.best.template_index == index
        assert result.best.score == pytest.approx(1.0, abs=1e-6)

    def test_full_scan_matches_exhaustive_oracle(self, db, objects, views):
        rng = np.random.default_rng(3)
        obj = objects[1]
        vp = views[int(rng.integers(len(views)))]
        grid, _ = render_synth(obj, vp, 0.1, seed=44)
        query = grid

        result = match(query, db, k=len(db), delta=0.2, use_occlusion=True)
        assert len(result.entries) == len(db)
        scores = [e.score for e in result.entries]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

        # Independent oracle: score each template through the similarity
        # module and compare the multiset of (identity, score).
        expected = {}
        for pos in range(len(db)):
            report = sim_occlusion_aware(
                query, db.features_at(pos), db.mask_at(pos), 0.2
            )
            expected[db.identity(pos)] = report.score
        for entry in result.entries:
            key = (entry.object_id, entry.template_index)
            assert entry.score == pytest.approx(expected[key], abs=1e-6)

    def test_restriction_matches_filtered_ranking(self, db):
        query = db.features_at(5)
        unrestricted = match(query, db, k=len(db))
        restricted = match(query, db, k=1, restrict_object=1)
        best_of_one = next(
            e for e in unrestricted.entries if e.object_id == 1
        )
        assert restricted.best.object_id == best_of_one.object_id
        assert restricted.best.template_index == best_of_one.template_index
        assert restricted.best.score == pytest.approx(best_of_one.score, abs=1e-12)

    def test_unknown_restriction(self, db):
        with pytest.raises(NotFoundError):
            match(db.features_at(0), db, k=1, restrict_object=99)

    def test_k_truncates(self, db):
        result = match(db.features_at(0), db, k=10_000)
        assert len(result.entries) == len(db)

    def test_no_occlusion_equals_delta_minus_one(self, db):
        query = db.features_at(8)
        a = match(query, db, k=5, use_occlusion=False, delta=0.7)
        b = match(query, db, k=5, use_occlusion=True, delta=-1.0)
        assert [(e.object_id, e.template_index) for e in a.entries] == [
            (e.object_id, e.template_index) for e in b.entries
        ]
        for x, y in zip(a.entries, b.entries):
            assert x.score == y.score

    def test_parallel_and_serial_rankings_identical(self, db):
        query = db.features_at(2)
        serial = match(query, db, k=len(db), threads=1)
        parallel = match(query, db, k=len(db), threads=8)
        assert serial.entries == parallel.entries

    def test_dimension_mismatch(self, db, rng):
        with pytest.raises(DimensionError):
            match(random_grid(rng, 3, 3, 2), db)

    def test_with_report(self, db):
        query = db.features_at(11)
        result = match(query, db, k=1, with_report=True)
        assert result.top_report is not None
        assert result.top_report.score == pytest.approx(result.best.score, abs=1e-6)

    def test_bad_k(self, db):
        with pytest.raises(ParameterError):
            match(db.features_at(0), db, k=0)


def vp_tilted(base: Viewpoint, angle_deg: float) -> Viewpoint:
    axis = np.array([1.0, 0.0, 0.0])
    if abs(base.direction @ axis) > 0.9:
        axis = np.array([0.0, 1.0, 0.0])
    axis = axis - base.direction * (base.direction @ axis)
    axis /= np.linalg.norm(axis)
    a = math.radians(angle_deg)
    return Viewpoint(math.cos(a) * base.direction + math.sin(a) * axis)


class TestAcc15:
    def test_all_exact(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        pairs = [(0, up), (1, up)]
        assert acc15(pairs, pairs) == 1.0

    def test_wrong_class_scores_zero(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        assert acc15([(1, up)], [(0, up)]) == 0.0

    def test_boundary_strictness(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        near = vp_tilted(up, 14.9)
        assert acc15([(0, near)], [(0, up)]) == 1.0
        # Exactly at the measured threshold: excluded.
        from gridpose.viewsphere import pose_error_deg

        off = vp_tilted(up, 20.0)
        d = pose_error_deg(off, up)
        assert acc15([(0, off)], [(0, up)], angle_thresh_deg=d) == 0.0

    def test_symmetric_objects_use_symmetric_error(self):
        a = Viewpoint(np.array([math.sin(0.5), 0.0, math.cos(0.5)]))
        b = Viewpoint(np.array([-math.sin(0.5), 0.0, math.cos(0.5)]))  # ~57 deg apart
        assert acc15([(7, a)], [(7, b)]) == 0.0
        assert acc15([(7, a)], [(7, b)], symmetric_object_ids={7}) == 1.0

    def test_permutation_invariance(self, rng):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        preds = [(i % 2, vp_tilted(up, float(rng.uniform(0, 40)))) for i in range(20)]
        gts = [(i % 2, up) for i in range(20)]
        perm = rng.permutation(20)
        shuffled_preds = [preds[i] for i in perm]
        shuffled_gts = [gts[i] for i in perm]
        assert acc15(preds, gts) == acc15(shuffled_preds, shuffled_gts)

    def test_length_mismatch(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ParameterError):
            acc15([(0, up)], [])


class TestMeanPoseError:
    def test_all_exact(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        assert mean_pose_error([(0, up)], [(0, up)]) == 0.0

    def test_single_30_degrees(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        assert mean_pose_error([(0, vp_tilted(up, 30.0))], [(0, up)]) == pytest.approx(
            30.0, abs=1e-6
        )

    def test_mixed_batch_matches_hand_sum(self):
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        preds = [(0, vp_tilted(up, 10.0)), (1, up), (0, vp_tilted(up, 40.0))]
        gts = [(0, up), (0, up), (0, up)]
        # Hand-summed: 10 + 180 (wrong class) + 40, over 3.
        expected = (
            sum([10.0, 180.0, 40.0]) / 3.0
        )
        assert mean_pose_error(preds, gts) == pytest.approx(expected, abs=1e-6)


class TestRankCorrelation:
    def test_exactly_decreasing_scores_give_plus_one(self):
        # Construction where the score is exactly a decreasing function of
        # pose distance: 1x1 grids whose cell vector rotates by half the
        # viewpoint tilt, so cosine = cos(tilt / 2).
        up = Viewpoint(np.array([0.0, 0.0, 1.0]))
        angles = np.linspace(0.0, 120.0, 13)
        records = []
        for i, theta in enumerate(angles):
            half = math.radians(theta / 2.0)
            cell = np.array([[[math.cos(half), math.sin(half)]]])
            records.append(
                TemplateRecord(
                    object_id=0,
                    template_index=i,
                    viewpoint=vp_tilted(up, theta) if theta else up,
                    rotation=viewpoint_to_rotation(vp_tilted(up, theta) if theta else up),
                    features=FeatureGrid(cell),
                    mask=BinaryMask.full(1, 1),
                    render_meta=meta(),
                )
            )
        db1 = build_db(records)
        query = FeatureGrid(np.array([[[1.0, 0.0]]]))
        rho = rank_correlation_diag([(query, up)], db1)
        assert rho == pytest.approx(1.0, abs=1e-12)

    def test_random_scores_uncorrelated(self, rng, views):
        # Random feature grids against a random single-object database.
        n = 40
        records = []
        for i in range(n):
            records.append(
                TemplateRecord(
                    object_id=0,
                    template_index=i,
                    viewpoint=views[i % len(views)],
                    rotation=viewpoint_to_rotation(views[i % len(views)]),
                    features=normalize_cells(random_grid(rng, 6, 6, 4)),
                    mask=random_mask(rng, 6, 6),
                    render_meta=meta(),
                )
            )
        dbr = build_db(records)
        queries = [
            (random_grid(rng, 6, 6, 4), views[int(rng.integers(len(views)))])
            for _ in range(25)
        ]
        rho = rank_correlation_diag(queries, dbr)  # 1,000 pairs
        assert abs(rho) < 0.2

    def test_multi_object_db_rejected(self, db):
        with pytest.raises(ParameterError):
            rank_correlation_diag([], db)

    def test_insufficient_data(self, objects, views):
        records = [record_from(objects[0], views[0], 0)]
        db1 = build_db(records)
        grid, _ = render_synth(objects[0], views[0], 0.0)
        with pytest.raises(InsufficientDataError):
            rank_correlation_diag([(grid, views[0])], db1)

    def test_trained_embedding_correlates_near_origin(self, views):
        # Harness target: strong pose/representation rank correlation for
        # pairs under 45 degrees after training on objects with nuisance
        # channels. Queries sit at continuous random poses so the distances
        # are not quantized to codebook hops.
        nuis_objects = [
            SynthObject.create(i, 12, 12, 16, master_seed=31, nuisance_channels=4)
            for i in range(6)
        ]
        views2 = enumerate_viewpoints(2, 0.0, 1)
        config = TrainConfig(batch_pairs=6, learning_rate=0.05, steps=400, seed=5)
        e = train_demo(nuis_objects, views2, config, noise_sigma=0.1, c_out=16).embedding
        records = [
            record_from(nuis_objects[0], vp, i, embedding=e)
            for i, vp in enumerate(views2)
        ]
        db1 = build_db(records)
        rng = np.random.default_rng(8)
        queries = []
        for _ in range(30):
            d = rng.standard_normal(3)
            d[2] = abs(d[2])
            vp = Viewpoint(d / np.linalg.norm(d))
            grid, _ = render_synth(
                nuis_objects[0], vp, 0.05, seed=int(rng.integers(2**31))
            )
            queries.append((embed(grid, e), vp))
        rho = rank_correlation_diag(queries, db1, max_pose_deg=45.0)
        assert rho > 0.8
