import numpy as np
import pytest

from vesselbench.core import LabelGrid
from vesselbench.rng import Stream
from vesselbench.superpixel import SuperpixelPartition
from vesselbench.suggest import (
    AlreadyLabeled,
    AnnotationSet,
    AnnotationStore,
    BadAnnotation,
    OracleAnnotator,
    AnnotationRequest,
    QueryBatch,
    annotated_pixel_fraction,
    annotation_set_from_json,
    annotation_set_to_json,
    materialize_store,
    merge_annotations,
    oracle_annotate,
    rle_decode,
    rle_encode,
    select_queries,
)
from vesselbench.uncertainty import SuperpixelUncertainty


def uncertainty_of(values, partition=None):
    values = np.asarray(values, dtype=np.float64)
    if partition is None:
        partition = SuperpixelPartition(np.arange(len(values), dtype=np.int32).reshape(1, -1), len(values))
    return SuperpixelUncertainty(values, partition)


def quad_partition():
    # 4x4 image, four 2x2 superpixels
    grid = np.array([
        [0, 0, 1, 1],
        [0, 0, 1, 1],
        [2, 2, 3, 3],
        [2, 2, 3, 3],
    ], dtype=np.int32)
    return SuperpixelPartition(grid, 4)


class TestSelectQueries:
    def test_enumerated_example(self):
        u = uncertainty_of([0.9, 0.8, 0.7, 0.6])
        batch = select_queries(u, labeled={0}, n_b=2, image_id="img", iteration=1)
        assert batch.superpixel_ids == (1, 2)
        assert batch.uncertainties == (0.8, 0.7)

    def test_zero_budget(self):
        u = uncertainty_of([0.9, 0.8])
        batch = select_queries(u, set(), 0, "img", 1)
        assert batch.superpixel_ids == ()

    def test_all_equal_takes_lowest_ids(self):
        u = uncertainty_of([0.5] * 6)
        batch = select_queries(u, labeled={1}, n_b=3, image_id="img", iteration=2)
        assert batch.superpixel_ids == (0, 2, 3)

    def test_pool_smaller_than_budget(self):
        u = uncertainty_of([0.3, 0.2, 0.1])
        batch = select_queries(u, labeled={0, 2}, n_b=8, image_id="img", iteration=1)
        assert batch.superpixel_ids == (1,)

    def test_topk_disjoint_scaling_fuzz(self):
        s = Stream(13, "select-fuzz")
        for trial in range(100):
            n = 3 + int(s.uniform() * 30)
            values = s.uniform(n)
            labeled = {i for i in range(n) if s.uniform() < 0.3}
            n_b = int(s.uniform() * 6)
            batch = select_queries(uncertainty_of(values), labeled, n_b, "img", 1)
            chosen = set(batch.superpixel_ids)
            assert not chosen & labeled
            assert len(chosen) == min(n_b, n - len(labeled))
            out = [i for i in range(n) if i not in labeled and i not in chosen]
            if chosen and out:
                assert min(values[i] for i in chosen) >= max(values[i] for i in out) - 1e-15
            scaled = select_queries(uncertainty_of(values * 7.25), labeled, n_b, "img", 1)
            assert scaled.superpixel_ids == batch.superpixel_ids


class TestOracle:
    def test_labels_equal_truth_on_batch(self):
        part = quad_partition()
        truth = LabelGrid((np.arange(16).reshape(4, 4) % 3 == 0).astype(np.uint8))
        batch = QueryBatch("img", 1, (1, 2), (0.5, 0.4))
        annotation = oracle_annotate(batch, truth, part)
        flat = truth.labels.ravel()
        for sp_id, labels in annotation.superpixels:
            np.testing.assert_array_equal(labels, flat[part.members(sp_id)])

    def test_empty_batch(self):
        part = quad_partition()
        truth = LabelGrid(np.zeros((4, 4), dtype=np.uint8))
        annotation = oracle_annotate(QueryBatch("img", 1, (), ()), truth, part)
        assert annotation.superpixels == ()

    def test_annotator_resolves_requests(self):
        part = quad_partition()
        truth = LabelGrid(np.ones((4, 4), dtype=np.uint8))
        annotator = OracleAnnotator({"img": truth})
        from vesselbench.core import GrayImage
        req = AnnotationRequest(
            batch=QueryBatch("img", 1, (0,), (0.9,)),
            partition=part,
            image=GrayImage(np.zeros((4, 4))),
            prediction=LabelGrid(np.zeros((4, 4), dtype=np.uint8)),
        )
        [annotation] = annotator.annotate_iteration([req])
        np.testing.assert_array_equal(annotation.superpixels[0][1], np.ones(4, dtype=np.uint8))


class TestStore:
    def make_set(self, ids, part, value=1):
        return AnnotationSet("img", 1, tuple(
            (i, np.full(len(part.members(i)), value, dtype=np.uint8)) for i in ids
        ))

    def test_merge_accumulates_cardinality(self):
        part = quad_partition()
        store = AnnotationStore()
        store = merge_annotations(store, self.make_set([0, 1], part), part)
        store = merge_annotations(store, self.make_set([2], part), part)
        assert store.superpixel_ids == {0, 1, 2}
        assert store.annotated_pixels(part) == 12

    def test_remerge_errors(self):
        part = quad_partition()
        store = merge_annotations(AnnotationStore(), self.make_set([0], part), part)
        with pytest.raises(AlreadyLabeled):
            merge_annotations(store, self.make_set([0], part), part)

    def test_empty_merge_identity(self):
        part = quad_partition()
        store = merge_annotations(AnnotationStore(), AnnotationSet("img", 1, ()), part)
        assert store.superpixel_ids == set()

    def test_partial_superpixel_rejected(self):
        part = quad_partition()
        bad = AnnotationSet("img", 1, ((0, np.array([1, 0], dtype=np.uint8)),))
        with pytest.raises(BadAnnotation):
            merge_annotations(AnnotationStore(), bad, part)

    def test_materialize(self):
        part = quad_partition()
        store = merge_annotations(AnnotationStore(), self.make_set([3], part, value=1), part)
        mask, labels = materialize_store(store, part)
        assert mask.sum() == 4
        assert (labels[mask] == 1).all()
        assert not labels[~mask].any()

    def test_budget_fraction_exact(self):
        part = quad_partition()
        stores = {"a": merge_annotations(AnnotationStore(), self.make_set([0, 2], part), part),
                  "b": AnnotationStore()}
        parts = {"a": part, "b": part}
        assert annotated_pixel_fraction(stores, parts) == 8 / 32


class TestRle:
    @pytest.mark.parametrize("labels", [
        [0, 0, 1, 1, 1, 0],
        [1, 1, 0],
        [0],
        [1],
        [0, 1, 0, 1, 0, 1],
        [1, 1, 1, 1],
    ])
    def test_round_trip(self, labels):
        arr = np.array(labels, dtype=np.uint8)
        runs = rle_encode(arr)
        np.testing.assert_array_equal(rle_decode(runs, len(arr)), arr)

    def test_leading_one_has_zero_first_run(self):
        assert rle_encode(np.array([1, 1, 0], dtype=np.uint8)) == [0, 2, 1]

    def test_bad_runs_rejected(self):
        with pytest.raises(BadAnnotation):
            rle_decode([5], 3)
        with pytest.raises(BadAnnotation):
            rle_decode([1], 3)

    def test_annotation_json_round_trip(self):
        part = quad_partition()
        original = AnnotationSet("train/0", 4, (
            (1, np.array([0, 1, 1, 0], dtype=np.uint8)),
            (3, np.array([1, 1, 1, 1], dtype=np.uint8)),
        ))
        obj = annotation_set_to_json(original)
        assert obj["superpixels"][0]["labels"] == [1, 2, 1]
        back = annotation_set_from_json(obj, part)
        assert back.image_id == original.image_id and back.iteration == original.iteration
        for (id_a, lab_a), (id_b, lab_b) in zip(original.superpixels, back.superpixels):
            assert id_a == id_b
            np.testing.assert_array_equal(lab_a, lab_b)
