"""Active reweighting policy: per-sample model uncertainty and physical
consistency scores from held-out fold inference, combined and softmax-
normalized (with additive smoothing) into the persisted weight table.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SampleSet, Standardizer
from .errors import ConfigError, DataError
from .graph import UrbanGraph
from .model import PhysicsGuidedNet
from .seeding import derive_seed

CONSISTENCY_GUARD = 1e-8
WEIGHT_TABLE_COLUMNS = ("sample_id", "fold", "chunk", "u_raw", "c_raw",
                        "u_norm", "c_norm", "epsilon", "epsilon_tilde")


def model_uncertainty(mc_stack: np.ndarray) -> np.ndarray:
    """Unbiased variance over the K MC-dropout passes, averaged over nodes and
    both flow channels; (K, S, M, 2) -> (S,)."""
    mc_stack = np.asarray(mc_stack, dtype=np.float64)
    if mc_stack.ndim != 4:
        raise ConfigError(f"expected (K, S, M, 2) stack, got shape {mc_stack.shape}")
    if mc_stack.shape[0] < 2:
        raise ConfigError("model uncertainty needs K >= 2 passes")
    var = mc_stack.var(axis=0, ddof=1)
    return var.mean(axis=(1, 2))


def physical_consistency(y_pred: np.ndarray, x_last: np.ndarray, graph: UrbanGraph,
                         aggregation: str = "row_normalized",
                         guard: float = CONSISTENCY_GUARD) -> np.ndarray:
    """Reciprocal mean squared deviation between the prediction and the
    adjacency-aggregated previous-step flows, per sample.

    Both inputs must be destandardized (original flow units): conservation is
    a physical statement, not a statistical one.
    """
    y_pred = np.asarray(y_pred, dtype=np.float64)
    x_last = np.asarray(x_last, dtype=np.float64)
    if not (np.isfinite(y_pred).all() and np.isfinite(x_last).all()):
        raise DataError("physical consistency requires finite inputs")
    if aggregation == "row_normalized":
        agg_matrix = graph.row_normalized_adjacency
    elif aggregation == "binary":
        agg_matrix = graph.adjacency
    else:
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    aggregated = np.einsum("ij,sjc->sic", agg_matrix, x_last)
    d2 = ((y_pred - aggregated) ** 2).mean(axis=(1, 2))
    return 1.0 / (d2 + guard)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] over one fold; a degenerate (constant) fold maps to 0.5."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("cannot normalize an empty score vector")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def combine_scores(u_norm: np.ndarray, c_norm: np.ndarray,
                   alpha: float, beta: float) -> np.ndarray:
    return alpha * np.asarray(u_norm, dtype=np.float64) + beta * np.asarray(c_norm, dtype=np.float64)


def normalize_weights(epsilons: np.ndarray) -> np.ndarray:
    """Softmax over one chunk plus the smoothing constant b = 1/N.

    Guarantees sum(eps_tilde) = 1 + N*b = 2 and every weight > b, so no sample
    is ever fully silenced.
    """
    eps = np.asarray(epsilons, dtype=np.float64)
    if eps.ndim != 1 or eps.size < 1:
        raise ConfigError("normalize_weights expects a non-empty 1-D chunk")
    shifted = np.exp(eps - eps.max())
    softmax = shifted / shifted.sum()
    return softmax + 1.0 / eps.size


def chunk_slices(n: int, chunk_size: int) -> list[slice]:
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1")
    return [slice(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


@dataclass(frozen=True)
class WeightTable:
    """Per-sample scores and normalized weights, keyed by stable sample id."""

    sample_id: np.ndarray
    fold: np.ndarray
    chunk: np.ndarray
    u_raw: np.ndarray
    c_raw: np.ndarray
    u_norm: np.ndarray
    c_norm: np.ndarray
    epsilon: np.ndarray
    epsilon_tilde: np.ndarray

    def __post_init__(self):
        n = len(self.sample_id)
        for col in WEIGHT_TABLE_COLUMNS:
            if len(getattr(self, col if col != "sample_id" else "sample_id")) != n:
                raise ConfigError(f"weight table column {col} has the wrong length")
        if len(np.unique(self.sample_id)) != n:
            raise ConfigError("weight table sample ids must be unique")

    def __len__(self) -> int:
        return len(self.sample_id)

    def weights_for_ids(self, ids: np.ndarray) -> np.ndarray:
        lookup = {int(sid): float(w) for sid, w in zip(self.sample_id, self.epsilon_tilde)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.float64)
        except KeyError as exc:
            raise ConfigError(f"no weight recorded for sample id {exc.args[0]}") from None

    def summary_by_flag(self, ids: np.ndarray, corrupted: np.ndarray) -> dict:
        """Mean epsilon_tilde split by ground-truth corruption flag."""
        flag_by_id = {int(i): bool(f) for i, f in zip(ids, corrupted)}
        flags = np.array([flag_by_id[int(i)] for i in self.sample_id], dtype=bool)
        out = {"n_corrupted": int(flags.sum()), "n_clean": int((~flags).sum())}
        out["mean_eps_tilde_corrupted"] = float(self.epsilon_tilde[flags].mean()) if flags.any() else None
        out["mean_eps_tilde_clean"] = float(self.epsilon_tilde[~flags].mean()) if (~flags).any() else None
        if out["mean_eps_tilde_corrupted"] is not None and out["mean_eps_tilde_clean"] is not None:
            out["corrupted_to_clean_ratio"] = out["mean_eps_tilde_corrupted"] / out["mean_eps_tilde_clean"]
        return out

    def to_csv(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(WEIGHT_TABLE_COLUMNS)
            for i in range(len(self)):
                writer.writerow([int(self.sample_id[i]), int(self.fold[i]), int(self.chunk[i]),
                                 *(format(float(getattr(self, c)[i]), ".17g")
                                   for c in WEIGHT_TABLE_COLUMNS[3:])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "WeightTable":
        cols: dict[str, list] = {c: [] for c in WEIGHT_TABLE_COLUMNS}
        with open(path) as fh:
            for row in csv.DictReader(fh):
                for c in WEIGHT_TABLE_COLUMNS:
                    cols[c].append(float(row[c]))
        ints = {"sample_id", "fold", "chunk"}
        return cls(**{c: np.array(v, dtype=np.int64 if c in ints else np.float64)
                      for c, v in cols.items()})


def _batched_forward(model: PhysicsGuidedNet, x: torch.Tensor, batch: int) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch):
            outs.append(model(x[start:start + batch]))
    return torch.cat(outs, dim=0)


def build_weight_table(fold_models: list[PhysicsGuidedNet],
                       fold_partitions: list[SampleSet],
                       graph: UrbanGraph,
                       standardizer: Standardizer,
                       alpha: float,
                       beta: float,
                       k_passes: int,
                       seed: int,
                       chunk_size: int,
                       aggregation: str = "row_normalized",
                       consistency_target: str = "prediction",
                       inference_batch: int = 1024) -> WeightTable:
    """Score each held-out fold with its own pretrained model and assemble the
    table: min-max normalize u and c within the fold, combine, then softmax-
    normalize in contiguous chunks of the training batch size.
    """
    if len(fold_models) != len(fold_partitions) or not fold_models:
        raise ConfigError("need exactly one trained model per fold partition")
    if any(m is None for m in fold_models):
        raise ConfigError("missing fold model")
    all_ids = np.concatenate([p.ids for p in fold_partitions])
    if len(np.unique(all_ids)) != len(all_ids):
        raise ConfigError("fold partitions overlap")

    columns: dict[str, list[np.ndarray]] = {c: [] for c in WEIGHT_TABLE_COLUMNS}
    for d, (model, part) in enumerate(zip(fold_models, fold_partitions)):
        if len(part) == 0:
            raise ConfigError(f"fold partition {d} is empty")
        model.eval()
        x = torch.from_numpy(part.x)

        u_chunks = []
        pred_chunks = []
        for ci, start in enumerate(range(0, len(part), inference_batch)):
            xb = x[start:start + inference_batch]
            with torch.no_grad():
                pred_chunks.append(model(xb).numpy())
            mc = model.mc_forward(xb, k_passes, derive_seed(seed, "fold", d, "batch", ci))
            u_chunks.append(model_uncertainty(mc.numpy()))
        y_pred = np.concatenate(pred_chunks, axis=0)
        u_raw = np.concatenate(u_chunks, axis=0)

        target = y_pred if consistency_target == "prediction" else part.y
        c_raw = physical_consistency(standardizer.inverse(np.asarray(target, dtype=np.float64)),
                                     standardizer.inverse(part.x[:, -1].astype(np.float64)),
                                     graph, aggregation=aggregation)
        u_norm = minmax_normalize(u_raw)
        c_norm = minmax_normalize(c_raw)
        epsilon = combine_scores(u_norm, c_norm, alpha, beta)
        eps_tilde = np.empty_like(epsilon)
        chunk_ids = np.empty(len(part), dtype=np.int64)
        for ci, sl in enumerate(chunk_slices(len(part), chunk_size)):
            eps_tilde[sl] = normalize_weights(epsilon[sl])
            chunk_ids[sl] = ci

        columns["sample_id"].append(part.ids)
        columns["fold"].append(np.full(len(part), d, dtype=np.int64))
        columns["chunk"].append(chunk_ids)
        columns["u_raw"].append(u_raw)
        columns["c_raw"].append(c_raw)
        columns["u_norm"].append(u_norm)
        columns["c_norm"].append(c_norm)
        columns["epsilon"].append(epsilon)
        columns["epsilon_tilde"].append(eps_tilde)

    return WeightTable(**{c: np.concatenate(v) for c, v in columns.items()})
