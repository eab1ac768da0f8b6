import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from melemad import cfsgb, dataset, gbdt
from melemad.errors import (
    ChunkLargerThanData,
    DegenerateStride,
    EmptySelection,
    IndexOutOfRange,
    ValidationError,
)

FAST_GBDT = gbdt.GbdtConfig(n_trees=10, max_depth=2, min_samples_leaf=2)


def synth(n, m, informative, seed, noise=0.3):
    ds, info = dataset.synthesize(
        dataset.SyntheticSpec(n=n, m=m, informative=informative, noise_sigma=noise, seed=seed)
    )
    return ds, info


class TestMakeChunks:
    def test_hand_enumerated_overlap(self):
        # n=10, p=0.4 -> l=4; q=0.5 -> overlap 2, stride 2
        chunks = cfsgb.make_chunks(10, cfsgb.ChunkSpec(p=0.4, q=0.5))
        assert [(c.start, c.stop) for c in chunks] == [(0, 4), (2, 6), (4, 8), (6, 10)]
        assert [c.index for c in chunks] == [0, 1, 2, 3]

    def test_no_overlap_disjoint(self):
        chunks = cfsgb.make_chunks(10, cfsgb.ChunkSpec(p=0.3, q=0.0))
        assert [(c.start, c.stop) for c in chunks] == [(0, 3), (3, 6), (6, 9), (9, 10)]
        assert len(chunks) == -(-10 // 3)  # ceil(n/l)

    def test_count_matches_floor_formula_when_divisible(self):
        # l = 20 divides n = 100 exactly: k = floor(n/l) = 5
        chunks = cfsgb.make_chunks(100, cfsgb.ChunkSpec(p=0.20, q=0.0))
        assert len(chunks) == 5
        assert chunks[0].size == 20

    def test_explicit_k(self):
        for k in (1, 5, 9, 17):
            chunks = cfsgb.make_chunks(100, cfsgb.ChunkSpec(p=0.20, q=0.20, explicit_k=k))
            assert len(chunks) == k
            cover = np.zeros(100, bool)
            for c in chunks:
                cover[c.start : c.stop] = True
            assert cover.all()

    def test_explicit_k_rejected_when_it_cannot_cover(self):
        # 2 chunks of 20 rows cannot span 100 rows
        with pytest.raises(ValidationError):
            cfsgb.make_chunks(100, cfsgb.ChunkSpec(p=0.20, q=0.20, explicit_k=2))

    def test_degenerate_stride(self):
        # l=4, q=0.9 -> overlap rounds to 4, stride 0
        with pytest.raises(DegenerateStride):
            cfsgb.make_chunks(10, cfsgb.ChunkSpec(p=0.4, q=0.9))

    def test_single_chunk_at_p_one(self):
        chunks = cfsgb.make_chunks(25, cfsgb.ChunkSpec(p=1.0, q=0.0))
        assert [(c.start, c.stop) for c in chunks] == [(0, 25)]

    def test_chunk_larger_than_data_guard(self):
        with pytest.raises((ChunkLargerThanData, ValidationError)):
            cfsgb.make_chunks(0, cfsgb.ChunkSpec(p=0.5, q=0.0))

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            cfsgb.ChunkSpec(p=0.0)
        with pytest.raises(ValidationError):
            cfsgb.ChunkSpec(q=1.0)

    @given(
        st.integers(1, 500),
        st.floats(0.02, 1.0),
        st.floats(0.0, 0.95),
    )
    @settings(max_examples=300, deadline=None)
    def test_coverage_and_overlap_structure(self, n, p, q):
        try:
            chunks = cfsgb.make_chunks(n, cfsgb.ChunkSpec(p=p, q=q))
        except (DegenerateStride, ValidationError):
            return
        cover = np.zeros(n, bool)
        for c in chunks:
            assert 0 <= c.start < c.stop <= n
            cover[c.start : c.stop] = True
        assert cover.all()
        # all but the final chunk share one stride
        if len(chunks) > 2:
            strides = {b.start - a.start for a, b in zip(chunks[:-2], chunks[1:-1])}
            assert len(strides) == 1


class TestThresholdSelect:
    def test_filter_arithmetic(self):
        picked = cfsgb.threshold_select(np.array([0.5, 0.3, 0.2, 0.0, 0.0]), 0.25)
        assert picked.tolist() == [0, 1]

    def test_tau_zero_keeps_only_positive(self):
        picked = cfsgb.threshold_select(np.array([0.4, 0.0, 0.6]), 0.0)
        assert picked.tolist() == [0, 2]

    def test_inclusive_comparison(self):
        picked = cfsgb.threshold_select(np.array([0.25, 0.24]), 0.25)
        assert picked.tolist() == [0]


class TestSelectChunkFeatures:
    def test_constant_label_chunk_selects_nothing(self):
        ds = dataset.LabeledDataset(
            np.random.default_rng(0).standard_normal((30, 4)), np.zeros(30, dtype=int)
        )
        picked, importances = cfsgb.select_chunk_features(ds, FAST_GBDT, 0.0)
        assert picked.size == 0
        assert np.all(importances == 0)

    def test_informative_feature_found(self):
        ds, info = synth(300, 6, 1, seed=3, noise=0.0)
        picked, _ = cfsgb.select_chunk_features(ds, FAST_GBDT, 0.1)
        assert info[0] in picked


class TestAggregateProject:
    def test_union(self):
        got = cfsgb.aggregate([np.array([1, 3]), np.array([3, 5])])
        assert got.tolist() == [1, 3, 5]

    def test_all_empty(self):
        assert cfsgb.aggregate([np.array([], dtype=int)] * 3).size == 0

    def test_single_chunk_identity(self):
        assert cfsgb.aggregate([np.array([2, 4])]).tolist() == [2, 4]

    def test_projection_basic(self):
        ds = dataset.LabeledDataset(np.arange(15, dtype=float).reshape(3, 5), [0, 1, 0])
        sel = cfsgb.SelectedFeatureSet(np.array([0, 2]), [], 0.0)
        out = cfsgb.project_dataset(ds, sel)
        assert out.m == 2 and out.n == 3
        np.testing.assert_array_equal(out.features[:, 0], ds.features[:, 0])
        np.testing.assert_array_equal(out.features[:, 1], ds.features[:, 2])
        np.testing.assert_array_equal(out.labels, ds.labels)

    def test_projection_all_indices_identity(self):
        ds = dataset.LabeledDataset(np.random.default_rng(1).random((4, 3)), [0, 1, 0, 1])
        sel = cfsgb.SelectedFeatureSet(np.arange(3), [], 0.0)
        np.testing.assert_array_equal(cfsgb.project_dataset(ds, sel).features, ds.features)

    def test_empty_selection_rejected(self):
        ds = dataset.LabeledDataset(np.ones((2, 2)), [0, 1])
        with pytest.raises(EmptySelection):
            cfsgb.project_dataset(ds, cfsgb.SelectedFeatureSet(np.array([], dtype=int), [], 0.0))

    def test_index_out_of_range(self):
        ds = dataset.LabeledDataset(np.ones((2, 2)), [0, 1])
        with pytest.raises(IndexOutOfRange):
            cfsgb.project_dataset(ds, cfsgb.SelectedFeatureSet(np.array([5]), [], 0.0))


class TestRunCfsgb:
    def test_recovers_planted_features(self):
        ds, info = synth(600, 30, 4, seed=7)
        selected, projected, report = cfsgb.run_cfsgb(
            ds, cfsgb.ChunkSpec(p=0.4, q=0.2), FAST_GBDT, tau=0.01
        )
        hits = set(info.tolist()) & set(selected.global_indices.tolist())
        assert len(hits) >= 3
        assert projected.m == selected.r
        assert report.k == len(report.chunk_sizes)

    def test_huge_tau_raises_empty_selection(self):
        ds, _ = synth(200, 8, 2, seed=8)
        with pytest.raises(EmptySelection):
            cfsgb.run_cfsgb(ds, cfsgb.ChunkSpec(p=0.5, q=0.0), FAST_GBDT, tau=2.0)

    def test_single_chunk_reduces_to_plain_selection(self):
        ds, _ = synth(250, 10, 3, seed=9)
        tau = 0.05
        selected, _, report = cfsgb.run_cfsgb(
            ds, cfsgb.ChunkSpec(p=1.0, q=0.0), FAST_GBDT, tau
        )
        assert report.k == 1
        direct, _ = cfsgb.select_chunk_features(ds, FAST_GBDT, tau)
        np.testing.assert_array_equal(selected.global_indices, direct)

    def test_threshold_monotonicity(self):
        ds, _ = synth(300, 12, 3, seed=10)
        spec = cfsgb.ChunkSpec(p=0.5, q=0.2)
        low, _, _ = cfsgb.run_cfsgb(ds, spec, FAST_GBDT, tau=0.001)
        high, _, _ = cfsgb.run_cfsgb(ds, spec, FAST_GBDT, tau=0.05)
        assert set(high.global_indices.tolist()) <= set(low.global_indices.tolist())

    def test_union_dominates_per_chunk(self):
        ds, _ = synth(300, 12, 3, seed=11)
        selected, _, _ = cfsgb.run_cfsgb(ds, cfsgb.ChunkSpec(p=0.4, q=0.3), FAST_GBDT, 0.01)
        union = set(selected.global_indices.tolist())
        for sel in selected.per_chunk:
            assert set(sel.indices.tolist()) <= union
            assert np.all(sel.scores >= selected.threshold_used)

    def test_parallel_equals_sequential(self, tmp_path):
        ds, _ = synth(400, 15, 3, seed=12)
        spec = cfsgb.ChunkSpec(p=0.3, q=0.2)
        seq, _, _ = cfsgb.run_cfsgb(ds, spec, FAST_GBDT, 0.01, threads=1)
        par, _, _ = cfsgb.run_cfsgb(ds, spec, FAST_GBDT, 0.01, threads=4)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        cfsgb.save_selection(seq, a)
        cfsgb.save_selection(par, b)
        assert a.read_bytes() == b.read_bytes()


class TestThresholdForTopK:
    def test_k_equals_m(self):
        ds, _ = synth(300, 6, 3, seed=13, noise=0.0)
        tau = cfsgb.threshold_for_top_k(ds, cfsgb.ChunkSpec(p=0.5, q=0.0), FAST_GBDT, 6)
        chunks = cfsgb.make_chunks(ds.n, cfsgb.ChunkSpec(p=0.5, q=0.0))
        imps = cfsgb._chunk_importances(ds, chunks, FAST_GBDT)
        stat = np.max(np.stack(imps), axis=0)
        if np.all(stat > 0):
            assert tau == 0.0 or tau == pytest.approx(stat.min())
        else:
            assert tau == pytest.approx(stat[stat > 0].min()) or tau == 0.0

    def test_k_one_is_largest_statistic(self):
        ds, _ = synth(300, 6, 2, seed=14, noise=0.0)
        spec = cfsgb.ChunkSpec(p=0.5, q=0.0)
        tau = cfsgb.threshold_for_top_k(ds, spec, FAST_GBDT, 1)
        imps = cfsgb._chunk_importances(ds, cfsgb.make_chunks(ds.n, spec), FAST_GBDT)
        assert tau == pytest.approx(float(np.max(np.stack(imps))))

    def test_self_consistency(self):
        ds, _ = synth(400, 20, 5, seed=15)
        spec = cfsgb.ChunkSpec(p=0.4, q=0.2)
        imps = cfsgb._chunk_importances(ds, cfsgb.make_chunks(ds.n, spec), FAST_GBDT)
        selectable = int(np.sum(np.max(np.stack(imps), axis=0) > 0))
        for k in (3, 8, 12):
            tau = cfsgb.threshold_for_top_k(ds, spec, FAST_GBDT, k)
            selected, _, _ = cfsgb.run_cfsgb(ds, spec, FAST_GBDT, tau)
            # the guarantee caps at the number of features that ever split
            assert selected.r >= min(k, selectable)


class TestSelectionPersistence:
    def test_round_trip(self, tmp_path):
        ds, _ = synth(200, 8, 2, seed=16)
        selected, _, _ = cfsgb.run_cfsgb(ds, cfsgb.ChunkSpec(p=0.5, q=0.0), FAST_GBDT, 0.01)
        path = tmp_path / "sel.json"
        cfsgb.save_selection(selected, path)
        back = cfsgb.load_selection(path)
        np.testing.assert_array_equal(back.global_indices, selected.global_indices)
        assert back.threshold_used == selected.threshold_used
        assert len(back.per_chunk) == len(selected.per_chunk)
        for x, y in zip(back.per_chunk, selected.per_chunk):
            np.testing.assert_array_equal(x.indices, y.indices)
            np.testing.assert_allclose(x.scores, y.scores)
