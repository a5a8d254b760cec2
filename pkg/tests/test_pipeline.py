import json

import numpy as np
import pytest
import torch

from urbanflow.data import generate_synthetic, SyntheticConfig
from urbanflow.errors import ConfigError, TrainingError
from urbanflow.graph import scaled_laplacian
from urbanflow.model import build_model
from urbanflow.pipeline import (TrainConfig, per_sample_loss, run_pgasr, split_folds,
                                train_model, train_pn_only, unweighted_loss,
                                weighted_loss)

from conftest import tiny_model_config, tiny_synthetic, tiny_train_config


class TestSplitFolds:
    def test_even_split(self):
        parts = split_folds(10, 2)
        assert [len(p) for p in parts] == [5, 5]

    def test_rounding_rule(self):
        parts = split_folds(11, 2)
        assert [len(p) for p in parts] == [6, 5]

    def test_partition_law(self):
        parts = split_folds(23, 4)
        union = np.concatenate(parts)
        assert np.array_equal(np.sort(union), np.arange(23))
        for i in range(len(parts)):
            for j in range(i + 1, len(parts)):
                assert len(np.intersect1d(parts[i], parts[j])) == 0

    def test_chronological_order(self):
        parts = split_folds(20, 3)
        assert parts[0].max() < parts[1].min() < parts[2].min()

    def test_too_many_folds_rejected(self):
        with pytest.raises(ConfigError):
            split_folds(3, 4)


class TestLosses:
    def test_single_sample_arithmetic(self):
        y = torch.tensor([[[2.0, 4.0]]])
        y_hat = torch.tensor([[[3.0, 3.0]]])
        assert float(unweighted_loss(y, y_hat, 0.5)) == pytest.approx(1.0)

    def test_lambda_one_ignores_outflow(self):
        y = torch.zeros(2, 3, 2)
        y_hat = torch.zeros(2, 3, 2)
        y_hat[..., 1] = 99.0  # only outflow wrong
        assert float(unweighted_loss(y, y_hat, 1.0)) == 0.0
        assert float(unweighted_loss(y, y_hat, 0.0)) > 0.0

    def test_perfect_predictor_zero_loss(self):
        y = torch.randn(4, 3, 2)
        assert float(unweighted_loss(y, y.clone(), 0.5)) == 0.0

    def test_unit_weights_equal_unweighted(self):
        y, y_hat = torch.randn(5, 3, 2), torch.randn(5, 3, 2)
        w = torch.ones(5)
        assert float(weighted_loss(y, y_hat, w, 0.3)) == pytest.approx(
            float(unweighted_loss(y, y_hat, 0.3)), rel=1e-6)

    def test_weight_two_zero_doubles_single_sample(self):
        y = torch.zeros(2, 3, 2)
        y_hat = torch.ones(2, 3, 2)
        single = float(weighted_loss(y[:1], y_hat[:1], torch.ones(1), 0.5))
        doubled = float(weighted_loss(y, y_hat, torch.tensor([2.0, 0.0]), 0.5))
        assert doubled == pytest.approx(2.0 * single, rel=1e-6)

    def test_doubling_weights_doubles_loss_keeps_gradient_direction(self):
        torch.manual_seed(0)
        y = torch.randn(4, 3, 2)
        pred = torch.randn(4, 3, 2, requires_grad=True)
        w = torch.rand(4) + 0.1
        l1 = weighted_loss(y, pred, w, 0.5)
        g1 = torch.autograd.grad(l1, pred)[0]
        l2 = weighted_loss(y, pred, 2.0 * w, 0.5)
        g2 = torch.autograd.grad(l2, pred)[0]
        assert float(l2.detach()) == pytest.approx(2.0 * float(l1.detach()), rel=1e-6)
        assert torch.allclose(g2, 2.0 * g1, rtol=1e-5, atol=1e-7)

    def test_positive_weights_zero_loss_iff_exact(self):
        y = torch.randn(3, 2, 2)
        w = torch.full((3,), 0.7)
        assert float(weighted_loss(y, y.clone(), w, 0.5)) == 0.0
        off = y.clone()
        off[1, 0, 0] += 1e-3
        assert float(weighted_loss(y, off, w, 0.5)) > 0.0

    def test_per_sample_loss_shape(self):
        out = per_sample_loss(torch.randn(7, 3, 2), torch.randn(7, 3, 2), 0.5)
        assert out.shape == (7,)


class TestTrainModel:
    def test_early_stopping_tracks_best(self, tiny_bundle):
        config = tiny_train_config(max_epochs=6, seed=1)
        op = scaled_laplacian(tiny_bundle.graph, config.model.chebyshev_order)
        model = build_model(config.model, op, 0, window_length=tiny_bundle.train.window_length)
        history = train_model(model, tiny_bundle.train, tiny_bundle.val,
                              tiny_bundle.standardizer, config, patience=2, phase_seed=0)
        assert history.best_val_mae == min(history.val_mae)
        assert history.val_mae[history.best_epoch] == history.best_val_mae

    def test_patience_stops_early(self, tiny_bundle):
        # vanishing lr: validation never improves after the first epoch
        config = tiny_train_config(max_epochs=50, learning_rate=1e-30, seed=1)
        op = scaled_laplacian(tiny_bundle.graph, config.model.chebyshev_order)
        model = build_model(config.model, op, 0, window_length=tiny_bundle.train.window_length)
        history = train_model(model, tiny_bundle.train, tiny_bundle.val,
                              tiny_bundle.standardizer, config, patience=3, phase_seed=0)
        # lr=0 never improves after the first epoch: 1 + patience epochs total
        assert len(history.val_mae) == 4

    def test_nonfinite_loss_aborts_with_diagnostic(self, tiny_bundle):
        config = tiny_train_config()
        op = scaled_laplacian(tiny_bundle.graph, config.model.chebyshev_order)
        model = build_model(config.model, op, 0, window_length=tiny_bundle.train.window_length)
        with torch.no_grad():
            model.decoder.out.weight.fill_(float("inf"))
        with pytest.raises(TrainingError):
            train_model(model, tiny_bundle.train, tiny_bundle.val,
                        tiny_bundle.standardizer, config, patience=2, phase_seed=0)


class TestRunPgasr:
    @pytest.fixture(scope="class")
    def run(self, tmp_path_factory):
        bundle = tiny_synthetic(n_steps=170, corruption=0.2, seed=5)
        config = tiny_train_config(seed=7)
        out = tmp_path_factory.mktemp("pgasr_run")
        return bundle, config, run_pgasr(bundle, config, out)

    def test_phase_order_and_records(self, run):
        _, config, result = run
        phases = [r.phase for r in result.phase_records]
        assert phases == ["pretrain_fold_0", "pretrain_fold_1", "infer_weights", "retrain"]
        assert (result.run_dir / "weight_table.csv").exists()
        assert (result.run_dir / "report.json").exists()
        assert (result.run_dir / "config.json").exists()

    def test_weight_table_covers_training_set_once(self, run):
        bundle, _, result = run
        assert np.array_equal(np.sort(result.weight_table.sample_id),
                              np.sort(bundle.train.ids))

    def test_fold_models_never_see_their_partition(self, run):
        bundle, config, result = run
        with open(result.run_dir / "fold_splits.json") as fh:
            fold_ids = [set(ids) for ids in json.load(fh)["fold_ids"]]
        all_ids = set(bundle.train.ids.tolist())
        for d, ids in enumerate(fold_ids):
            warmup = all_ids - ids
            assert warmup & ids == set()
            assert warmup | ids == all_ids

    def test_report_contents(self, run):
        _, config, result = run
        report = result.report
        assert report["method"] == "pgasr"
        assert report["metrics"]["mae_in"] >= 0
        assert report["weight_summary"]["n_corrupted"] > 0
        assert report["seed"] == config.seed

    def test_weighted_retrain_used_positive_weights(self, run):
        _, _, result = run
        assert (result.weight_table.epsilon_tilde > 0).all()


class TestDeterminismAndResume:
    def test_same_seed_byte_identical_outputs(self, tmp_path):
        bundle = tiny_synthetic(n_steps=170, corruption=0.2, seed=5)
        config = tiny_train_config(seed=3)
        r1 = run_pgasr(bundle, config, tmp_path / "a")
        r2 = run_pgasr(bundle, config, tmp_path / "b")
        w1 = (tmp_path / "a" / "weight_table.csv").read_bytes()
        w2 = (tmp_path / "b" / "weight_table.csv").read_bytes()
        assert w1 == w2
        assert r1.report["metrics"] == r2.report["metrics"]

    def test_resume_reuses_checkpoints_bit_exactly(self, tmp_path):
        bundle = tiny_synthetic(n_steps=170, seed=5)
        config = tiny_train_config(seed=3)
        out = tmp_path / "run"
        run_pgasr(bundle, config, out)
        fold_bytes = [(out / f"pretrain_fold_{d}.pt").read_bytes() for d in (0, 1)]
        table_bytes = (out / "weight_table.csv").read_bytes()
        # simulated crash before the retrain phase completed
        (out / "retrain.pt").unlink()
        (out / "report.json").unlink()
        result = run_pgasr(bundle, config, out)
        for d in (0, 1):
            assert (out / f"pretrain_fold_{d}.pt").read_bytes() == fold_bytes[d]
        assert (out / "weight_table.csv").read_bytes() == table_bytes
        reused = {r.phase: r.reused for r in result.phase_records}
        assert reused["pretrain_fold_0"] and reused["pretrain_fold_1"] and reused["infer_weights"]
        assert not reused["retrain"]

    def test_config_mismatch_rejected(self, tmp_path):
        bundle = tiny_synthetic(n_steps=170, seed=5)
        run_pgasr(bundle, tiny_train_config(seed=3), tmp_path / "run")
        with pytest.raises(ConfigError, match="different config"):
            run_pgasr(bundle, tiny_train_config(seed=4), tmp_path / "run")


class TestTrainPnOnly:
    def test_report_schema_matches_pgasr(self, tmp_path):
        bundle = tiny_synthetic(n_steps=170, seed=5)
        config = tiny_train_config(seed=2)
        pn = train_pn_only(bundle, config, tmp_path / "pn")
        pg = run_pgasr(bundle, config, tmp_path / "pg")
        assert set(pn.report.keys()) == set(pg.report.keys())
        assert pn.report["method"] == "pn_dis"

    def test_continuous_variant(self, tmp_path):
        bundle = tiny_synthetic(n_steps=140, seed=6)
        config = tiny_train_config(seed=2, max_epochs=1,
                                   model=tiny_model_config(variant="pn_con"))
        result = train_pn_only(bundle, config, tmp_path / "con", method_name="pn_con")
        assert result.report["method"] == "pn_con"
        assert result.report["metrics"]["mae_in"] >= 0


class TestTrainConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda_balance=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(n_folds=1)
        with pytest.raises(ConfigError):
            TrainConfig(patience_pretrain=0)
        with pytest.raises(ConfigError):
            TrainConfig(k_passes=1)
