import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safemon.detect import BBox, Detection
from safemon.errors import AbstractionFitError, DataError
from safemon.oms import (
    BoxAbstraction,
    build_abstraction,
    check_oms,
    contains,
    contains_many,
    dumps_abstraction,
    fit_oms,
    kmeans_labels,
    load_abstraction,
    loads_abstraction,
    partition_features,
    save_abstraction,
)


def three_blobs(rng, per=60, d=3, spacing=20.0):
    blobs = [rng.normal(c * spacing, 1.0, size=(per, d)) for c in range(3)]
    return np.vstack(blobs)


class TestKmeans:
    def test_deterministic_for_fixed_seed(self):
        pts = three_blobs(np.random.default_rng(0))
        a = kmeans_labels(pts, 3, seed=42)
        b = kmeans_labels(pts, 3, seed=42)
        assert np.array_equal(a, b)

    def test_recovers_well_separated_blobs(self):
        pts = three_blobs(np.random.default_rng(1), per=50)
        labels = kmeans_labels(pts, 3, seed=7)
        for start in (0, 50, 100):
            block = labels[start : start + 50]
            assert len(set(block.tolist())) == 1
        assert len(set(labels.tolist())) == 3

    def test_duplicate_heavy_data_still_yields_k_nonempty_clusters(self):
        pts = np.vstack([np.zeros((40, 2)), np.full((1, 2), 5.0), np.full((1, 2), -7.0)])
        subsets = partition_features(pts, 3, seed=0)
        assert len(subsets) == 3
        assert all(len(s) > 0 for s in subsets)
        assert sum(len(s) for s in subsets) == len(pts)

    def test_k_bounds(self):
        pts = np.zeros((5, 2))
        with pytest.raises(ValueError):
            kmeans_labels(pts, 0, seed=0)
        with pytest.raises(ValueError):
            kmeans_labels(pts, 6, seed=0)

    def test_k_equals_n_gives_singletons(self):
        pts = np.arange(8, dtype=float).reshape(4, 2) * 10
        subsets = partition_features(pts, 4, seed=3)
        assert sorted(len(s) for s in subsets) == [1, 1, 1, 1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 6), st.integers(6, 40))
    def test_partition_invariants(self, seed, k, n):
        rng = np.random.default_rng(seed)
        pts = rng.normal(0, 5, size=(n, 3))
        subsets = partition_features(pts, k, seed=seed)
        assert len(subsets) == k
        assert all(len(s) >= 1 for s in subsets)
        stacked = np.vstack(subsets)
        assert stacked.shape == pts.shape
        # every original point appears exactly once across subsets
        order = np.lexsort(stacked.T)
        order_orig = np.lexsort(pts.T)
        assert np.allclose(stacked[order], pts[order_orig])


class TestAbstraction:
    def test_boxes_are_tight_plus_epsilon(self):
        rng = np.random.default_rng(2)
        subs = [rng.uniform(-5, 5, size=(20, 4)) for _ in range(3)]
        a = build_abstraction(subs, epsilon=0.25)
        for j, s in enumerate(subs):
            assert np.allclose(a.lo[j], s.min(axis=0) - 0.25)
            assert np.allclose(a.hi[j], s.max(axis=0) + 0.25)

    def test_contains_boundary_points(self):
        a = build_abstraction([np.array([[0.0, 0.0], [2.0, 4.0]])], epsilon=0.0)
        assert contains(a, [0.0, 0.0])
        assert contains(a, [2.0, 4.0])
        assert contains(a, [1.0, 2.0])
        assert not contains(a, [2.0001, 4.0])

    def test_union_semantics(self):
        a = build_abstraction(
            [np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[10.0, 10.0], [11.0, 11.0]])]
        )
        assert contains(a, [0.5, 0.5])
        assert contains(a, [10.5, 10.5])
        assert not contains(a, [5.0, 5.0])

    def test_every_training_point_contained_at_epsilon_zero(self):
        rng = np.random.default_rng(3)
        pts = three_blobs(rng, per=80, d=5)
        subs = partition_features(pts, 3, seed=1)
        a = build_abstraction(subs, epsilon=0.0)
        assert contains_many(a, pts).all()

    def test_contains_many_agrees_with_scalar_contains(self):
        rng = np.random.default_rng(4)
        subs = [rng.normal(0, 1, size=(30, 3)), rng.normal(8, 1, size=(30, 3))]
        a = build_abstraction(subs, epsilon=0.1)
        queries = rng.normal(4, 4, size=(200, 3))
        vec = contains_many(a, queries)
        scalar = np.array([contains(a, q) for q in queries])
        assert np.array_equal(vec, scalar)

    def test_dimension_mismatch(self):
        a = build_abstraction([np.zeros((3, 4))])
        with pytest.raises(ValueError, match="dimension"):
            contains(a, [0.0, 0.0])
        with pytest.raises(ValueError, match="dimension"):
            contains_many(a, np.zeros((5, 3)))

    def test_validation(self):
        with pytest.raises(ValueError):
            build_abstraction([], epsilon=0.0)
        with pytest.raises(ValueError):
            build_abstraction([np.zeros((0, 3))])
        with pytest.raises(ValueError):
            build_abstraction([np.zeros((3, 2)), np.zeros((3, 4))])
        with pytest.raises(ValueError):
            build_abstraction([np.zeros((3, 2))], epsilon=-0.1)
        with pytest.raises(ValueError):
            BoxAbstraction(lo=np.ones((1, 2)), hi=np.zeros((1, 2)))


def _det(x0, y0, x1, y1, conf=0.9):
    return Detection(bbox=BBox(x0, y0, x1, y1), confidence=conf)


class TestFitOms:
    def test_learns_only_matched_detection_features(self):
        gt = [BBox(10, 10, 30, 30)]
        good = (_det(10.5, 10.2, 30.1, 29.8), np.array([1.0, 1.0]))
        junk = (_det(50, 50, 60, 60), np.array([40.0, 40.0]))
        traces = [([good, junk], gt)] * 3
        a = fit_oms(traces, tau_iou=0.7, k=1, epsilon=0.0, seed=0)
        assert contains(a, [1.0, 1.0])
        assert not contains(a, [40.0, 40.0])

    def test_confidence_threshold_excludes_low_conf_matches(self):
        gt = [BBox(10, 10, 30, 30)]
        lowconf = (_det(10.5, 10.2, 30.1, 29.8, conf=0.2), np.array([7.0, 7.0]))
        highconf = (_det(10.5, 10.2, 30.1, 29.8, conf=0.9), np.array([1.0, 1.0]))
        traces = [([lowconf], gt), ([highconf], gt), ([highconf], gt)]
        a = fit_oms(traces, tau_iou=0.7, k=1, epsilon=0.0, seed=0, tau_conf=0.5)
        assert not contains(a, [7.0, 7.0])

    def test_too_few_matches_suggests_smaller_k(self):
        gt = [BBox(10, 10, 30, 30)]
        good = (_det(10.5, 10.2, 30.1, 29.8), np.array([1.0, 1.0]))
        with pytest.raises(AbstractionFitError, match="smaller k"):
            fit_oms([([good], gt)], tau_iou=0.7, k=5, epsilon=0.0, seed=0)

    def test_no_matches_at_all(self):
        gt = [BBox(10, 10, 30, 30)]
        junk = (_det(50, 50, 60, 60), np.array([1.0, 1.0]))
        with pytest.raises(AbstractionFitError):
            fit_oms([([junk], gt)], tau_iou=0.7, k=1, epsilon=0.0, seed=0)


class TestCheckOms:
    def setup_method(self):
        self.a = build_abstraction([np.array([[0.0, 0.0], [2.0, 2.0]])], epsilon=0.0)

    def test_empty_detections_accept(self):
        v = check_oms(self.a, [])
        assert v.accepted and v.stage == "OMS"

    def test_all_inside_accepts(self):
        dets = [(_det(0, 0, 1, 1), np.array([1.0, 1.0])), (_det(0, 0, 1, 1), np.array([0.5, 2.0]))]
        assert check_oms(self.a, dets).accepted

    def test_one_escaping_feature_rejects_and_is_indexed(self):
        dets = [
            (_det(0, 0, 1, 1), np.array([1.0, 1.0])),
            (_det(0, 0, 1, 1), np.array([9.0, 9.0])),
        ]
        v = check_oms(self.a, dets)
        assert v.rejected
        assert v.reasons == ("detection[1]: feature outside all boxes",)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            check_oms(self.a, [(_det(0, 0, 1, 1), np.array([1.0, 1.0, 1.0]))])


class TestSerialization:
    def _sample(self):
        rng = np.random.default_rng(11)
        subs = [rng.normal(i * 6, 1, size=(15, 4)) for i in range(3)]
        return build_abstraction(subs, epsilon=0.125)

    def test_round_trip_is_bit_exact(self):
        a = self._sample()
        b = loads_abstraction(dumps_abstraction(a))
        assert np.array_equal(a.lo, b.lo)
        assert np.array_equal(a.hi, b.hi)
        assert a.epsilon == b.epsilon

    def test_file_round_trip_and_byte_determinism(self, tmp_path):
        a = self._sample()
        save_abstraction(a, tmp_path / "a.txt")
        save_abstraction(a, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        b = load_abstraction(tmp_path / "a.txt")
        assert np.array_equal(a.lo, b.lo) and np.array_equal(a.hi, b.hi)

    def test_rejects_wrong_header(self):
        with pytest.raises(DataError, match="header"):
            loads_abstraction("not-a-model v1\n")

    def test_rejects_truncated_and_malformed(self):
        text = dumps_abstraction(self._sample())
        with pytest.raises(DataError, match="lines"):
            loads_abstraction("\n".join(text.splitlines()[:-1]) + "\n")
        swapped = text.replace("lo ", "xx ", 1)
        with pytest.raises(DataError):
            loads_abstraction(swapped)
