"""Metrics and experiment protocols: noise robustness, component ablations,
and hyperparameter sweeps. Emits a schema-versioned report.json plus one flat
CSV per figure analogue for external plotting.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetBundle, inject_noise
from .errors import ConfigError
from .seeding import derive_seed

REPORT_SCHEMA_VERSION = 1
DEFAULT_MAPE_MASK = 10.0
NOISE_LEVELS = (0.1, 0.3, 0.5)
ABLATION_VARIANTS = ("pgasr", "wo_mu", "wo_pc", "pn")
SWEEP_GRIDS = {"alpha": (0.6, 0.7, 0.8, 0.9, 1.0),
               "beta": (0.6, 0.7, 0.8, 0.9, 1.0),
               "D": (2, 3, 4, 5)}


@dataclass(frozen=True)
class MetricSet:
    mae_in: float
    mae_out: float
    mape_in: float | None
    mape_out: float | None
    n_eval_points: int
    mape_mask_threshold: float

    @property
    def mae_mean(self) -> float:
        return 0.5 * (self.mae_in + self.mae_out)


def metricset_to_dict(metrics: MetricSet) -> dict:
    payload = dataclasses.asdict(metrics)
    payload["mae_mean"] = metrics.mae_mean
    return payload


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray,
                    mask_threshold: float = DEFAULT_MAPE_MASK) -> MetricSet:
    """MAE and masked MAPE (percent) per flow channel on destandardized values.

    MAPE is evaluated only where the true flow is >= mask_threshold; an empty
    mask reports the channel's MAPE as absent rather than zero.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.shape[-1] != 2:
        raise ConfigError(f"metric tensors must share a (..., 2) shape, "
                          f"got {y_true.shape} vs {y_pred.shape}")
    err = np.abs(y_true - y_pred)
    mae = [float(err[..., c].mean()) for c in range(2)]
    mape: list[float | None] = []
    n_points = 0
    for c in range(2):
        mask = y_true[..., c] >= mask_threshold
        n_points += int(mask.sum())
        if mask.any():
            mape.append(float((err[..., c][mask] / np.abs(y_true[..., c][mask])).mean() * 100.0))
        else:
            mape.append(None)
    return MetricSet(mae_in=mae[0], mae_out=mae[1], mape_in=mape[0], mape_out=mape[1],
                     n_eval_points=n_points, mape_mask_threshold=float(mask_threshold))


# ---------------------------------------------------------------------------
# Experiment cells
# ---------------------------------------------------------------------------

def _run_method(bundle: DatasetBundle, config, method: str, run_dir: Path) -> dict:
    from . import pipeline  # local import: pipeline depends on this module

    if method == "pgasr":
        result = pipeline.run_pgasr(bundle, config, run_dir)
    elif method in ("pn", "pn_dis", "pn_con"):
        result = pipeline.train_pn_only(bundle, config, run_dir, method_name=method)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return result.report


def run_cell(bundle: DatasetBundle, config, method: str, cell_name: str,
             out_dir: str | Path) -> dict:
    """Run one experiment cell and flatten its report into a row dict."""
    row = {"cell": cell_name, "method": method, "seed": config.seed, "status": "ok",
           "error": None}
    try:
        report = _run_method(bundle, config, method, Path(out_dir) / cell_name)
        row.update(report["metrics"])
        row["fold_split_hash"] = report.get("fold_split_hash")
        summary = report.get("weight_summary") or {}
        row["weight_ratio_corrupted_to_clean"] = summary.get("corrupted_to_clean_ratio")
    except Exception as exc:  # cell failures are recorded, not fatal
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc()
    return row


def _execute_cells(cells: list[tuple], jobs: int) -> list[dict]:
    if jobs <= 1:
        return [run_cell(*cell) for cell in cells]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=jobs)(delayed(run_cell)(*cell) for cell in cells)


def _aggregate(rows: list[dict], group_keys: tuple[str, ...]) -> list[dict]:
    """Mean +/- std of MAE metrics over seeds; std absent with < 2 seeds."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        key = tuple(row[k] for k in group_keys)
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in sorted(groups.items(), key=lambda kv: repr(kv[0])):
        entry = dict(zip(group_keys, key))
        entry["n_seeds"] = len(members)
        for metric in ("mae_in", "mae_out", "mae_mean"):
            vals = np.array([m[metric] for m in members], dtype=np.float64)
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) >= 2 else None
        out.append(entry)
    return out


def _write_report(out_dir: Path, protocol: str, config, rows: list[dict],
                  aggregates: list[dict], extra: dict, started: float) -> dict:
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "protocol": protocol,
        "config": dataclasses.asdict(config),
        "rows": [{k: v for k, v in r.items() if k != "traceback"} for r in rows],
        "aggregates": aggregates,
        "failures": [r["cell"] for r in rows if r["status"] != "ok"],
        **extra,
        "timing": {"wall_time_s": time.perf_counter() - started},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def _write_csv(path: Path, rows: list[dict], columns: list[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c) for c in columns])


METRIC_COLUMNS = ["mae_in", "mae_out", "mae_mean", "mape_in", "mape_out", "status"]


def noise_robustness_experiment(bundle: DatasetBundle, config,
                                levels=NOISE_LEVELS,
                                methods=("pn", "pgasr"),
                                seeds=(0, 1, 2, 3),
                                out_dir: str | Path = "noise_experiment",
                                jobs: int = 1) -> dict:
    """Train each method on a train split with `level` of its samples replaced
    by Gaussian noise, evaluate on the clean test split; level 0 degenerates to
    the plain overall comparison."""
    import dataclasses as dc
    out = Path(out_dir)
    started = time.perf_counter()
    cells = []
    coords = []
    for level in levels:
        for seed in seeds:
            if level > 0:
                noisy = inject_noise(bundle, level, derive_seed(seed, "noise-level", level))
            else:
                noisy = bundle
            for method in methods:
                cell_cfg = dc.replace(config, seed=seed)
                name = f"noise_l{int(round(level * 100))}_{method}_s{seed}"
                cells.append((noisy, cell_cfg, method, name, out / "cells"))
                coords.append(float(level))
    rows = _execute_cells(cells, jobs)
    for row, level in zip(rows, coords):
        row["level"] = level
    aggregates = _aggregate(rows, ("level", "method"))
    report = _write_report(out, "noise_robustness", config, rows, aggregates,
                           {"levels": list(levels), "methods": list(methods),
                            "seeds": list(seeds)}, started)
    _write_csv(out / "fig3_noise.csv", rows, ["level", "method", "seed", *METRIC_COLUMNS])
    return report


def ablation_experiment(bundle: DatasetBundle, config,
                        seeds=(0, 1, 2, 3),
                        out_dir: str | Path = "ablation_experiment",
                        jobs: int = 1) -> dict:
    """Full pipeline vs. alpha=0 (w/o MU), beta=0 (w/o PC), and the unweighted
    baseline, under identical seeds and fold splits."""
    import dataclasses as dc
    out = Path(out_dir)
    started = time.perf_counter()
    cells = []
    variants = []
    for seed in seeds:
        for variant in ABLATION_VARIANTS:
            cfg = dc.replace(config, seed=seed)
            if variant == "wo_mu":
                cfg = dc.replace(cfg, alpha=0.0)
            elif variant == "wo_pc":
                cfg = dc.replace(cfg, beta=0.0)
            method = "pn" if variant == "pn" else "pgasr"
            name = f"ablation_{variant}_s{seed}"
            cells.append((bundle, cfg, method, name, out / "cells"))
            variants.append(variant)
    rows = _execute_cells(cells, jobs)
    for row, variant in zip(rows, variants):
        row["variant"] = variant
    aggregates = _aggregate(rows, ("variant",))
    report = _write_report(out, "ablation", config, rows, aggregates,
                           {"variants": list(ABLATION_VARIANTS), "seeds": list(seeds)}, started)
    _write_csv(out / "fig4_ablation.csv", rows,
               ["variant", "seed", *METRIC_COLUMNS, "fold_split_hash"])
    return report


def hyperparameter_sweep(bundle: DatasetBundle, config,
                         alphas=SWEEP_GRIDS["alpha"],
                         betas=SWEEP_GRIDS["beta"],
                         fold_counts=SWEEP_GRIDS["D"],
                         seeds=(0, 1, 2, 3),
                         axes=("alpha", "beta", "D"),
                         out_dir: str | Path = "sweep_experiment",
                         jobs: int = 1) -> dict:
    """One axis varied at a time with the others fixed at their defaults."""
    import dataclasses as dc
    out = Path(out_dir)
    started = time.perf_counter()
    grids = {"alpha": alphas, "beta": betas, "D": fold_counts}
    cells = []
    coords = []
    for axis in axes:
        if axis not in grids or not grids[axis]:
            raise ConfigError(f"empty or unknown sweep axis {axis!r}")
        for value in grids[axis]:
            for seed in seeds:
                cfg = dc.replace(config, seed=seed)
                if axis == "alpha":
                    cfg = dc.replace(cfg, alpha=float(value))
                elif axis == "beta":
                    cfg = dc.replace(cfg, beta=float(value))
                else:
                    cfg = dc.replace(cfg, n_folds=int(value))
                name = f"sweep_{axis}_{value}_s{seed}"
                cells.append((bundle, cfg, "pgasr", name, out / "cells"))
                coords.append((axis, value, seed))
    rows = _execute_cells(cells, jobs)
    for row, (axis, value, seed) in zip(rows, coords):
        row["axis"] = axis
        row["value"] = value
    aggregates = _aggregate(rows, ("axis", "value"))
    best = {}
    for axis in axes:
        axis_rows = [a for a in aggregates if a["axis"] == axis]
        if axis_rows:
            best_row = min(axis_rows, key=lambda a: a["mae_mean_mean"])
            best[axis] = {"value": best_row["value"], "mae_mean": best_row["mae_mean_mean"]}
    report = _write_report(out, "hyperparameter_sweep", config, rows, aggregates,
                           {"axes": list(axes), "best_by_mae": best, "seeds": list(seeds)},
                           started)
    _write_csv(out / "fig5_sweep.csv", rows, ["axis", "value", "seed", *METRIC_COLUMNS])
    return report
