"""Training orchestration: D-fold pretraining, held-out weight inference,
weighted retraining, early stopping, checkpointing, and resumable run dirs.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetBundle, SampleSet, Standardizer
from .errors import ConfigError, TrainingError
from .evaluation import compute_metrics, metricset_to_dict
from .graph import UrbanGraph, scaled_laplacian
from .model import (ModelConfig, PhysicsGuidedNet, build_model, load_checkpoint,
                    save_checkpoint)
from .reweighting import WeightTable, build_weight_table
from .seeding import derive_seed

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    lambda_balance: float = 0.5
    n_folds: int = 2
    alpha: float = 0.8
    beta: float = 0.9
    k_passes: int = 10
    patience_pretrain: int = 15
    patience_retrain: int = 30
    max_epochs: int = 200
    seed: int = 0
    grad_clip: float = 5.0
    consistency_aggregation: str = "row_normalized"
    consistency_target: str = "prediction"
    inference_batch: int = 1024
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not (0.0 <= self.lambda_balance <= 1.0):
            raise ConfigError("lambda_balance must lie in [0, 1]")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.patience_pretrain < 1 or self.patience_retrain < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size/max_epochs must be >= 1 and learning_rate > 0")
        if self.k_passes < 2:
            raise ConfigError("k_passes must be >= 2")


@dataclass
class PhaseRecord:
    phase: str
    best_epoch: int
    best_val_mae: float
    wall_time_s: float
    checkpoint: str
    reused: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def split_folds(n_samples: int, n_folds: int, seed: int = 0) -> list[np.ndarray]:
    """Contiguous chronological partitions with sizes differing by at most 1.

    The split is deterministic; `seed` is accepted for interface stability but
    unused because folds are chronological (time-series leakage hygiene).
    """
    if n_folds > n_samples:
        raise ConfigError(f"cannot split {n_samples} samples into {n_folds} folds")
    return [idx for idx in np.array_split(np.arange(n_samples), n_folds)]


def _destd(values: torch.Tensor, standardizer: Standardizer) -> torch.Tensor:
    std = torch.as_tensor(standardizer.std, dtype=values.dtype, device=values.device)
    mean = torch.as_tensor(standardizer.mean, dtype=values.dtype, device=values.device)
    return values * std + mean


def per_sample_loss(y_true: torch.Tensor, y_pred: torch.Tensor,
                    lambda_balance: float) -> torch.Tensor:
    """lambda*|inflow err| + (1-lambda)*|outflow err|, node-averaged, per sample.

    Expects destandardized tensors of shape (B, M, 2); returns (B,).
    """
    err = (y_true - y_pred).abs().mean(dim=-2)
    return lambda_balance * err[..., 0] + (1.0 - lambda_balance) * err[..., 1]


def weighted_loss(y_true: torch.Tensor, y_pred: torch.Tensor,
                  epsilon_tilde: torch.Tensor, lambda_balance: float) -> torch.Tensor:
    """Sum over the batch of epsilon_tilde_i times the per-sample flow loss."""
    return (epsilon_tilde * per_sample_loss(y_true, y_pred, lambda_balance)).sum()


def unweighted_loss(y_true: torch.Tensor, y_pred: torch.Tensor,
                    lambda_balance: float) -> torch.Tensor:
    return per_sample_loss(y_true, y_pred, lambda_balance).sum()


def _validation_mae(model: PhysicsGuidedNet, val: SampleSet, standardizer: Standardizer,
                    batch: int) -> float:
    """Mean of inflow/outflow MAE on destandardized values."""
    model.eval()
    errs = []
    with torch.no_grad():
        for start in range(0, len(val), batch):
            xb = torch.from_numpy(val.x[start:start + batch])
            yb = torch.from_numpy(val.y[start:start + batch])
            pred = model(xb)
            diff = (_destd(pred, standardizer) - _destd(yb, standardizer)).abs()
            errs.append(diff.mean(dim=(0, 1)) * diff.shape[0])
    per_channel = torch.stack(errs).sum(dim=0) / len(val)
    return float(per_channel.mean())


@dataclass
class TrainHistory:
    val_mae: list[float]
    best_epoch: int
    best_val_mae: float


def train_model(model: PhysicsGuidedNet, train: SampleSet, val: SampleSet,
                standardizer: Standardizer, config: TrainConfig, patience: int,
                phase_seed: int, sample_weights: np.ndarray | None = None) -> TrainHistory:
    """Adam training with early stopping on validation MAE; restores the best
    parameters before returning. `sample_weights` aligns positionally with
    `train` and switches the loss from unweighted to weighted."""
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    order_rng = np.random.default_rng(derive_seed(phase_seed, "batch-order"))
    model.seed_dropout(derive_seed(phase_seed, "dropout"))

    x_all = torch.from_numpy(train.x)
    y_all = torch.from_numpy(train.y)
    w_all = None if sample_weights is None else torch.as_tensor(sample_weights, dtype=x_all.dtype)

    best_state = copy.deepcopy(model.state_dict())
    best_val = float("inf")
    best_epoch = -1
    epochs_without_improvement = 0
    history: list[float] = []

    for epoch in range(config.max_epochs):
        model.train()
        order = order_rng.permutation(len(train))
        for b_start in range(0, len(train), config.batch_size):
            idx = order[b_start:b_start + config.batch_size]
            pred = model(x_all[idx])
            y_d = _destd(y_all[idx], standardizer)
            pred_d = _destd(pred, standardizer)
            if w_all is None:
                loss = unweighted_loss(y_d, pred_d, config.lambda_balance)
            else:
                loss = weighted_loss(y_d, pred_d, w_all[idx], config.lambda_balance)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // config.batch_size} "
                    f"(lr={config.learning_rate})")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

        val_mae = _validation_mae(model, val, standardizer, config.inference_batch)
        history.append(val_mae)
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= patience:
                break

    model.load_state_dict(best_state)
    return TrainHistory(val_mae=history, best_epoch=best_epoch, best_val_mae=best_val)


def pretrain_fold(fold_index: int, warmup: SampleSet, val: SampleSet,
                  bundle: DatasetBundle, config: TrainConfig) -> tuple[PhysicsGuidedNet, TrainHistory]:
    """Train a freshly initialized network on all folds except `fold_index`."""
    if len(warmup) == 0:
        raise ConfigError("warmup data is empty")
    graph_op = scaled_laplacian(bundle.graph, config.model.chebyshev_order)
    seed = derive_seed(config.seed, "pretrain", fold_index)
    model = build_model(config.model, graph_op, seed, window_length=warmup.window_length)
    history = train_model(model, warmup, val, bundle.standardizer, config,
                          config.patience_pretrain, seed)
    return model, history


def _evaluate_test(model: PhysicsGuidedNet, test: SampleSet, standardizer: Standardizer,
                   batch: int, mape_mask_threshold: float = 10.0):
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(test), batch):
            preds.append(model(torch.from_numpy(test.x[start:start + batch])).numpy())
    y_pred = standardizer.inverse(np.concatenate(preds, axis=0).astype(np.float64))
    y_true = standardizer.inverse(test.y.astype(np.float64))
    return compute_metrics(y_true, y_pred, mask_threshold=mape_mask_threshold)


def _config_snapshot(config: TrainConfig, method: str) -> dict:
    snap = dataclasses.asdict(config)
    snap["method"] = method
    return snap


def _fold_split_hash(fold_ids: list[list[int]]) -> str:
    blob = json.dumps(fold_ids, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    tmp.replace(path)


def _check_or_write_config(run_dir: Path, snapshot: dict):
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        with open(cfg_path) as fh:
            existing = json.load(fh)
        if existing != snapshot:
            raise ConfigError(f"run directory {run_dir} was created with a different config; "
                              "use a fresh directory to change parameters")
    else:
        _write_json(cfg_path, snapshot)


@dataclass
class RunResult:
    model: PhysicsGuidedNet
    weight_table: WeightTable | None
    phase_records: list[PhaseRecord]
    report: dict
    run_dir: Path


def _build_report(method: str, config: TrainConfig, metrics, phase_records,
                  weight_summary: dict | None, fold_hash: str | None,
                  timing: dict) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "method": method,
        "config": _config_snapshot(config, method),
        "seed": config.seed,
        "fold_split_hash": fold_hash,
        "metrics": metricset_to_dict(metrics),
        "weight_summary": weight_summary,
        "phase_records": [r.to_dict() for r in phase_records],
        "timing": timing,
    }


def run_pgasr(bundle: DatasetBundle, config: TrainConfig, out_dir: str | Path) -> RunResult:
    """The full reweighting pipeline: chronological fold split, one pretrain per
    fold on the complementary warm-up data, held-out weight inference, then a
    freshly initialized retrain on all training data with the weighted loss.

    The run directory is resumable: completed phase artifacts are reused
    bit-exactly on rerun, and any phase failure leaves earlier checkpoints in
    place.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _check_or_write_config(run_dir, _config_snapshot(config, "pgasr"))
    graph_op = scaled_laplacian(bundle.graph, config.model.chebyshev_order)
    train, val, test = bundle.train, bundle.val, bundle.test
    timing: dict[str, float] = {}

    fold_index_parts = split_folds(len(train), config.n_folds, config.seed)
    fold_ids = [[int(i) for i in train.ids[idx]] for idx in fold_index_parts]
    fold_hash = _fold_split_hash(fold_ids)
    _write_json(run_dir / "fold_splits.json", {"fold_ids": fold_ids, "hash": fold_hash})

    records: list[PhaseRecord] = []
    fold_models: list[PhysicsGuidedNet] = []
    for d, idx in enumerate(fold_index_parts):
        ckpt = run_dir / f"pretrain_fold_{d}.pt"
        start = time.perf_counter()
        if ckpt.exists():
            model, meta = load_checkpoint(ckpt, graph_op, window_length=train.window_length)
            records.append(PhaseRecord(phase=f"pretrain_fold_{d}",
                                       best_epoch=meta.get("best_epoch", -1),
                                       best_val_mae=meta.get("best_val_mae", float("nan")),
                                       wall_time_s=0.0, checkpoint=ckpt.name, reused=True))
        else:
            warmup_idx = np.concatenate([p for e, p in enumerate(fold_index_parts) if e != d])
            model, history = pretrain_fold(d, train.subset(warmup_idx), val, bundle, config)
            save_checkpoint(ckpt, model, {"fold_index": d, "best_epoch": history.best_epoch,
                                          "best_val_mae": history.best_val_mae})
            records.append(PhaseRecord(phase=f"pretrain_fold_{d}",
                                       best_epoch=history.best_epoch,
                                       best_val_mae=history.best_val_mae,
                                       wall_time_s=time.perf_counter() - start,
                                       checkpoint=ckpt.name))
        timing[f"pretrain_fold_{d}_s"] = time.perf_counter() - start
        fold_models.append(model)

    table_path = run_dir / "weight_table.csv"
    start = time.perf_counter()
    if table_path.exists():
        table = WeightTable.from_csv(table_path)
        records.append(PhaseRecord(phase="infer_weights", best_epoch=-1, best_val_mae=float("nan"),
                                   wall_time_s=0.0, checkpoint=table_path.name, reused=True))
    else:
        table = build_weight_table(
            fold_models, [train.subset(idx) for idx in fold_index_parts], bundle.graph,
            bundle.standardizer, config.alpha, config.beta, config.k_passes,
            derive_seed(config.seed, "weights"), config.batch_size,
            aggregation=config.consistency_aggregation,
            consistency_target=config.consistency_target,
            inference_batch=config.inference_batch)
        table.to_csv(table_path)
        records.append(PhaseRecord(phase="infer_weights", best_epoch=-1, best_val_mae=float("nan"),
                                   wall_time_s=time.perf_counter() - start,
                                   checkpoint=table_path.name))
    timing["infer_weights_s"] = time.perf_counter() - start

    retrain_ckpt = run_dir / "retrain.pt"
    start = time.perf_counter()
    if retrain_ckpt.exists():
        retrain_model, meta = load_checkpoint(retrain_ckpt, graph_op,
                                              window_length=train.window_length)
        records.append(PhaseRecord(phase="retrain", best_epoch=meta.get("best_epoch", -1),
                                   best_val_mae=meta.get("best_val_mae", float("nan")),
                                   wall_time_s=0.0, checkpoint=retrain_ckpt.name, reused=True))
    else:
        weights = table.weights_for_ids(train.ids)
        retrain_seed = derive_seed(config.seed, "retrain")
        retrain_model = build_model(config.model, graph_op, retrain_seed,
                                    window_length=train.window_length)
        history = train_model(retrain_model, train, val, bundle.standardizer, config,
                              config.patience_retrain, retrain_seed, sample_weights=weights)
        save_checkpoint(retrain_ckpt, retrain_model,
                        {"best_epoch": history.best_epoch, "best_val_mae": history.best_val_mae})
        records.append(PhaseRecord(phase="retrain", best_epoch=history.best_epoch,
                                   best_val_mae=history.best_val_mae,
                                   wall_time_s=time.perf_counter() - start,
                                   checkpoint=retrain_ckpt.name))
    timing["retrain_s"] = time.perf_counter() - start

    metrics = _evaluate_test(retrain_model, test, bundle.standardizer, config.inference_batch)
    weight_summary = table.summary_by_flag(train.ids, train.corrupted)
    report = _build_report("pgasr", config, metrics, records, weight_summary, fold_hash, timing)
    _write_json(run_dir / "phase_records.json", {"records": [r.to_dict() for r in records]})
    _write_json(run_dir / "report.json", report)
    return RunResult(model=retrain_model, weight_table=table, phase_records=records,
                     report=report, run_dir=run_dir)


def train_pn_only(bundle: DatasetBundle, config: TrainConfig, out_dir: str | Path,
                  method_name: str | None = None) -> RunResult:
    """Single-phase unweighted training on all training data: the plain network
    baseline, also the all-weights-equal ablation. Honors config.model.variant."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    method = method_name or config.model.variant
    _check_or_write_config(run_dir, _config_snapshot(config, method))
    graph_op = scaled_laplacian(bundle.graph, config.model.chebyshev_order)
    timing: dict[str, float] = {}

    ckpt = run_dir / "train.pt"
    start = time.perf_counter()
    if ckpt.exists():
        model, meta = load_checkpoint(ckpt, graph_op, window_length=bundle.train.window_length)
        record = PhaseRecord(phase="train", best_epoch=meta.get("best_epoch", -1),
                             best_val_mae=meta.get("best_val_mae", float("nan")),
                             wall_time_s=0.0, checkpoint=ckpt.name, reused=True)
    else:
        seed = derive_seed(config.seed, "train-only")
        model = build_model(config.model, graph_op, seed,
                            window_length=bundle.train.window_length)
        history = train_model(model, bundle.train, bundle.val, bundle.standardizer,
                              config, config.patience_retrain, seed)
        save_checkpoint(ckpt, model, {"best_epoch": history.best_epoch,
                                      "best_val_mae": history.best_val_mae})
        record = PhaseRecord(phase="train", best_epoch=history.best_epoch,
                             best_val_mae=history.best_val_mae,
                             wall_time_s=time.perf_counter() - start, checkpoint=ckpt.name)
    timing["train_s"] = time.perf_counter() - start

    metrics = _evaluate_test(model, bundle.test, bundle.standardizer, config.inference_batch)
    report = _build_report(method, config, metrics, [record], None, None, timing)
    _write_json(run_dir / "phase_records.json", {"records": [record.to_dict()]})
    _write_json(run_dir / "report.json", report)
    return RunResult(model=model, weight_table=None, phase_records=[record],
                     report=report, run_dir=run_dir)
