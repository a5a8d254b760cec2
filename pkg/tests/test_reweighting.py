import numpy as np
import pytest
import torch

from urbanflow.data import SampleSet
from urbanflow.errors import ConfigError, DataError
from urbanflow.graph import build_grid_graph, scaled_laplacian
from urbanflow.model import build_model
from urbanflow.reweighting import (WeightTable, build_weight_table, chunk_slices,
                                   combine_scores, minmax_normalize, model_uncertainty,
                                   normalize_weights, physical_consistency)

from conftest import tiny_model_config, tiny_synthetic


class TestModelUncertainty:
    def test_identical_copies_zero(self):
        stack = np.tile(np.random.default_rng(0).standard_normal((1, 3, 4, 2)), (5, 1, 1, 1))
        assert np.allclose(model_uncertainty(stack), 0.0)

    def test_two_scalar_outputs(self):
        # K=2 predictions 1 and 3: unbiased variance ((1-2)^2 + (3-2)^2) / 1 = 2
        stack = np.zeros((2, 1, 1, 2))
        stack[0] = 1.0
        stack[1] = 3.0
        assert np.allclose(model_uncertainty(stack), 2.0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        stack = rng.standard_normal((6, 4, 5, 2))
        assert np.allclose(model_uncertainty(stack), model_uncertainty(stack + 13.7))

    def test_k_below_two_rejected(self):
        with pytest.raises(ConfigError):
            model_uncertainty(np.zeros((1, 2, 3, 2)))


class TestPhysicalConsistency:
    def setup_method(self):
        self.graph = build_grid_graph(2, 2, "four")

    def test_exact_conservation_hits_guard_cap(self):
        x_last = np.random.default_rng(0).gamma(2.0, 2.0, size=(3, 4, 2))
        y_pred = np.einsum("ij,sjc->sic", self.graph.row_normalized_adjacency, x_last)
        c = physical_consistency(y_pred, x_last, self.graph)
        assert np.allclose(c, 1e8)

    def test_scalar_deviation_two(self):
        x_last = np.zeros((1, 4, 2))
        y_pred = np.full((1, 4, 2), 2.0)  # deviation 2 everywhere -> d^2 = 4
        c = physical_consistency(y_pred, x_last, self.graph)
        assert abs(c[0] - 0.25) < 1e-8

    def test_monotone_in_deviation(self):
        x_last = np.random.default_rng(2).gamma(2.0, 2.0, size=(1, 4, 2))
        agg = np.einsum("ij,sjc->sic", self.graph.row_normalized_adjacency, x_last)
        dev = np.random.default_rng(3).standard_normal((1, 4, 2))
        c1 = physical_consistency(agg + dev, x_last, self.graph)
        c2 = physical_consistency(agg + 1.5 * dev, x_last, self.graph)
        assert c2[0] < c1[0]

    def test_nonfinite_rejected(self):
        bad = np.full((1, 4, 2), np.nan)
        with pytest.raises(DataError):
            physical_consistency(bad, np.zeros((1, 4, 2)), self.graph)

    def test_binary_aggregation_mode(self):
        x_last = np.ones((1, 4, 2))
        # degree-2 nodes: binary aggregation sums to 2, row-normalized to 1
        c_bin = physical_consistency(np.full((1, 4, 2), 2.0), x_last, self.graph,
                                     aggregation="binary")
        assert np.allclose(c_bin, 1e8)
        with pytest.raises(ConfigError):
            physical_consistency(x_last, x_last, self.graph, aggregation="other")


class TestMinMax:
    def test_known_values(self):
        assert np.allclose(minmax_normalize(np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])

    def test_constant_maps_to_half(self):
        assert np.allclose(minmax_normalize(np.full(5, 3.3)), 0.5)

    def test_order_preserved(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal(40)
        assert np.array_equal(np.argsort(v), np.argsort(minmax_normalize(v)))


class TestCombineScores:
    def test_arithmetic(self):
        eps = combine_scores(np.array([0.5]), np.array([0.2]), alpha=0.8, beta=0.9)
        assert abs(eps[0] - 0.58) < 1e-12

    def test_zero_coefficients_collapse(self):
        rng = np.random.default_rng(5)
        eps = combine_scores(rng.random(10), rng.random(10), 0.0, 0.0)
        assert np.allclose(eps, 0.0)

    def test_single_component_modes(self):
        u, c = np.array([0.3, 0.7]), np.array([0.9, 0.1])
        assert np.allclose(combine_scores(u, c, 0.0, 1.0), c)   # w/o MU
        assert np.allclose(combine_scores(u, c, 1.0, 0.0), u)   # w/o PC


class TestNormalizeWeights:
    def test_uniform_case(self):
        out = normalize_weights(np.zeros(4))
        assert np.allclose(out, 0.5)
        assert abs(out.sum() - 2.0) < 1e-12

    def test_closed_form_softmax(self):
        out = normalize_weights(np.array([np.log(2.0), 0.0]))
        assert np.allclose(out, [7.0 / 6.0, 5.0 / 6.0], atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 32, 37])
    def test_sum_and_bounds(self, n):
        rng = np.random.default_rng(n)
        eps = rng.standard_normal(n) * 3.0
        out = normalize_weights(eps)
        assert abs(out.sum() - 2.0) < 1e-6
        assert (out > 1.0 / n).all()
        # upper bound open for n >= 2; attained exactly at the n=1 degenerate chunk
        if n == 1:
            assert np.allclose(out, 2.0)
        else:
            assert (out < 1.0 + 1.0 / n).all()

    def test_rank_preserved(self):
        rng = np.random.default_rng(8)
        eps = rng.standard_normal(25)
        out = normalize_weights(eps)
        assert np.array_equal(np.argsort(eps), np.argsort(out))

    def test_overflow_guarded(self):
        out = normalize_weights(np.array([1e4, 1e4 - 1.0]))
        assert np.isfinite(out).all()
        assert abs(out.sum() - 2.0) < 1e-6

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            normalize_weights(np.array([]))


class TestChunking:
    def test_chunk_layout(self):
        slices = chunk_slices(70, 32)
        assert [s.stop - s.start for s in slices] == [32, 32, 6]

    def test_bad_chunk_size(self):
        with pytest.raises(ConfigError):
            chunk_slices(10, 0)


def make_fold_inputs(n_steps=170, corruption=0.0, seed=0):
    bundle = tiny_synthetic(n_steps=n_steps, corruption=corruption, seed=seed)
    op = scaled_laplacian(bundle.graph, 2)
    cfg = tiny_model_config()
    models = [build_model(cfg, op, s, window_length=bundle.train.window_length)
              for s in (1, 2)]
    half = len(bundle.train) // 2
    parts = [bundle.train.subset(np.arange(half)),
             bundle.train.subset(np.arange(half, len(bundle.train)))]
    return bundle, models, parts


class TestBuildWeightTable:
    def test_partition_arithmetic(self):
        bundle, models, parts = make_fold_inputs()
        table = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                   0.8, 0.9, 3, seed=0, chunk_size=16)
        assert len(table) == len(bundle.train)
        assert (np.sort(table.sample_id) == np.sort(bundle.train.ids)).all()
        assert set(table.fold.tolist()) == {0, 1}

    def test_chunk_sums(self):
        bundle, models, parts = make_fold_inputs()
        table = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                   0.8, 0.9, 3, seed=0, chunk_size=16)
        for d in (0, 1):
            for ci in np.unique(table.chunk[table.fold == d]):
                sel = (table.fold == d) & (table.chunk == ci)
                assert abs(table.epsilon_tilde[sel].sum() - 2.0) < 1e-6

    def test_reproducible_bytes(self, tmp_path):
        bundle, models, parts = make_fold_inputs()
        t1 = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                0.8, 0.9, 3, seed=4, chunk_size=16)
        t2 = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                0.8, 0.9, 3, seed=4, chunk_size=16)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        t1.to_csv(p1)
        t2.to_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_overlapping_partitions_abort(self):
        bundle, models, parts = make_fold_inputs()
        with pytest.raises(ConfigError, match="overlap"):
            build_weight_table(models, [parts[0], parts[0]], bundle.graph,
                               bundle.standardizer, 0.8, 0.9, 3, seed=0, chunk_size=16)

    def test_missing_model_abort(self):
        bundle, models, parts = make_fold_inputs()
        with pytest.raises(ConfigError, match="missing"):
            build_weight_table([models[0], None], parts, bundle.graph,
                               bundle.standardizer, 0.8, 0.9, 3, seed=0, chunk_size=16)

    def test_csv_roundtrip(self, tmp_path):
        bundle, models, parts = make_fold_inputs()
        table = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                   0.8, 0.9, 3, seed=0, chunk_size=16)
        table.to_csv(tmp_path / "w.csv")
        back = WeightTable.from_csv(tmp_path / "w.csv")
        assert np.array_equal(back.sample_id, table.sample_id)
        assert np.array_equal(back.epsilon_tilde, table.epsilon_tilde)

    def test_weights_for_ids_missing_id_aborts(self):
        bundle, models, parts = make_fold_inputs()
        table = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                   0.8, 0.9, 3, seed=0, chunk_size=16)
        with pytest.raises(ConfigError, match="no weight"):
            table.weights_for_ids(np.array([10**9]))

    def test_zero_coefficients_give_equal_weights_per_chunk(self):
        bundle, models, parts = make_fold_inputs()
        table = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                   0.0, 0.0, 3, seed=0, chunk_size=16)
        for d in (0, 1):
            for ci in np.unique(table.chunk[table.fold == d]):
                sel = (table.fold == d) & (table.chunk == ci)
                w = table.epsilon_tilde[sel]
                assert np.allclose(w, w[0])

    def test_label_consistency_mode(self):
        bundle, models, parts = make_fold_inputs()
        t_pred = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                    0.0, 1.0, 3, seed=0, chunk_size=16,
                                    consistency_target="prediction")
        t_label = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                     0.0, 1.0, 3, seed=0, chunk_size=16,
                                     consistency_target="label")
        assert not np.allclose(t_pred.c_raw, t_label.c_raw)

    def test_summary_by_flag(self):
        bundle, models, parts = make_fold_inputs(n_steps=260, corruption=0.3, seed=2)
        half = len(bundle.train) // 2
        parts = [bundle.train.subset(np.arange(half)),
                 bundle.train.subset(np.arange(half, len(bundle.train)))]
        table = build_weight_table(models, parts, bundle.graph, bundle.standardizer,
                                   0.8, 0.9, 3, seed=0, chunk_size=16)
        summary = table.summary_by_flag(bundle.train.ids, bundle.train.corrupted)
        assert summary["n_corrupted"] + summary["n_clean"] == len(bundle.train)
        assert "corrupted_to_clean_ratio" in summary
