"""Command-line entry point: data preparation, training, and the experiment
protocols. A plain key=value config file can seed any option; explicit flags
win over the file, the file wins over built-in defaults, and the effective
config is snapshotted into the output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import (SyntheticConfig, convert_research_dump, generate_synthetic,
                   load_bundle_dir, write_bundle_dir)
from .errors import ConfigError, DataError, GraphError, UrbanFlowError
from .evaluation import (NOISE_LEVELS, SWEEP_GRIDS, ablation_experiment,
                         hyperparameter_sweep, noise_robustness_experiment)
from .model import ModelConfig
from .pipeline import TrainConfig, run_pgasr, train_pn_only

METHODS = ("pgasr", "pn_dis", "pn_con")

# config-file key -> (type, help); shared by train and experiment subcommands
TRAIN_OPTION_TYPES = {
    "method": str, "seed": int, "alpha": float, "beta": float, "d": int,
    "lambda": float, "batch_size": int, "lr": float, "max_epochs": int,
    "patience_pretrain": int, "patience_retrain": int, "k": int,
    "embed_dim": int, "n_st_blocks": int, "chebyshev_order": int,
    "temporal_kernel": int, "dropout": float, "integrator_steps": int,
    "consistency_aggregation": str, "consistency_target": str,
}

TRAIN_DEFAULTS = {
    "method": "pgasr", "seed": 0, "alpha": 0.8, "beta": 0.9, "d": 2,
    "lambda": 0.5, "batch_size": None, "lr": 0.001, "max_epochs": 200,
    "patience_pretrain": 15, "patience_retrain": 30, "k": 10,
    "embed_dim": 64, "n_st_blocks": 2, "chebyshev_order": 3,
    "temporal_kernel": 3, "dropout": 0.1, "integrator_steps": 1,
    "consistency_aggregation": "row_normalized", "consistency_target": "prediction",
}


def read_config_file(path: str | Path) -> dict:
    """Parse key=value lines ('#' starts a comment); unknown keys are rejected."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in TRAIN_OPTION_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = TRAIN_OPTION_TYPES[key](value.strip())
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value.strip()!r}")
    return values


def resolve_options(cli_values: dict, config_file: str | None) -> dict:
    """CLI flag > config file > built-in default."""
    merged = dict(TRAIN_DEFAULTS)
    if config_file:
        merged.update(read_config_file(config_file))
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    if merged["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {merged['method']!r}")
    return merged


def build_train_config(options: dict, num_nodes: int) -> TrainConfig:
    batch = options["batch_size"]
    if batch is None:
        batch = 20 if num_nodes >= 1024 else 32  # large grids use the smaller batch
    variant = "pn_con" if options["method"] == "pn_con" else "pn_dis"
    model = ModelConfig(embed_dim=options["embed_dim"], n_st_blocks=options["n_st_blocks"],
                        chebyshev_order=options["chebyshev_order"],
                        temporal_kernel=options["temporal_kernel"],
                        dropout_rate=options["dropout"], variant=variant,
                        integrator_steps=options["integrator_steps"])
    return TrainConfig(learning_rate=options["lr"], batch_size=batch,
                       lambda_balance=options["lambda"], n_folds=options["d"],
                       alpha=options["alpha"], beta=options["beta"],
                       k_passes=options["k"], patience_pretrain=options["patience_pretrain"],
                       patience_retrain=options["patience_retrain"],
                       max_epochs=options["max_epochs"], seed=options["seed"],
                       consistency_aggregation=options["consistency_aggregation"],
                       consistency_target=options["consistency_target"], model=model)


def _snapshot_options(options: dict, out_dir: Path, name: str = "cli_config.json"):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as fh:
        json.dump(options, fh, indent=2, sort_keys=True)


def _add_train_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file (flags override it)")
    parser.add_argument("--method", choices=METHODS, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--d", type=int, default=None, help="number of pretraining folds")
    parser.add_argument("--lambda", dest="lambda_", type=float, default=None,
                        help="inflow/outflow loss balance")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--max-epochs", type=int, default=None)
    parser.add_argument("--patience-pretrain", type=int, default=None)
    parser.add_argument("--patience-retrain", type=int, default=None)
    parser.add_argument("--k", type=int, default=None, help="MC-dropout passes")
    parser.add_argument("--embed-dim", type=int, default=None)
    parser.add_argument("--n-st-blocks", type=int, default=None)
    parser.add_argument("--chebyshev-order", type=int, default=None)
    parser.add_argument("--temporal-kernel", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=None)
    parser.add_argument("--integrator-steps", type=int, default=None)


def _collect_train_values(args) -> dict:
    return {
        "method": args.method, "seed": args.seed, "alpha": args.alpha, "beta": args.beta,
        "d": args.d, "lambda": args.lambda_, "batch_size": args.batch_size, "lr": args.lr,
        "max_epochs": args.max_epochs, "patience_pretrain": args.patience_pretrain,
        "patience_retrain": args.patience_retrain, "k": args.k,
        "embed_dim": args.embed_dim, "n_st_blocks": args.n_st_blocks,
        "chebyshev_order": args.chebyshev_order, "temporal_kernel": args.temporal_kernel,
        "dropout": args.dropout, "integrator_steps": args.integrator_steps,
    }


def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.synthetic == (args.convert is not None):
        raise ConfigError("pass exactly one of --synthetic or --convert")
    if args.synthetic:
        cfg = SyntheticConfig(height=args.h, width=args.w, n_steps=args.steps,
                              t_in=args.t_in, corruption_fraction=args.corruption,
                              seed=args.seed, source_amplitude=args.amplitude,
                              w_s_true=args.w_s, w_r_true=args.w_r,
                              neighborhood=args.neighborhood)
        bundle = generate_synthetic(cfg)
        write_bundle_dir(bundle, out)
        _snapshot_options(dataclasses.asdict(cfg), out, "synthetic_config.json")
    else:
        convert_research_dump(args.convert, out, interval_minutes=args.interval,
                              height=args.grid_height, width=args.grid_width)
        bundle = load_bundle_dir(out)
    print(f"wrote bundle to {out}")
    for name, split in bundle.splits().items():
        print(f"  {name}: {len(split)} samples, x{tuple(split.x.shape)}, "
              f"corrupted={int(split.corrupted.sum())}")
    print(f"  graph: {bundle.graph.height}x{bundle.graph.width} "
          f"({bundle.graph.neighborhood}), interval {bundle.interval_minutes} min")
    return 0


def cmd_train(args) -> int:
    options = resolve_options(_collect_train_values(args), args.config)
    bundle = load_bundle_dir(args.data)
    config = build_train_config(options, bundle.graph.num_nodes)
    out = Path(args.out)
    _snapshot_options(options, out)
    if options["method"] == "pgasr":
        result = run_pgasr(bundle, config, out)
    else:
        result = train_pn_only(bundle, config, out, method_name=options["method"])
    metrics = result.report["metrics"]
    print(f"method={options['method']} seed={options['seed']}")
    print(f"test MAE in/out: {metrics['mae_in']:.4f} / {metrics['mae_out']:.4f}")
    if metrics["mape_in"] is not None:
        print(f"test MAPE in/out: {metrics['mape_in']:.2f}% / {metrics['mape_out']:.2f}%")
    print(f"report: {result.run_dir / 'report.json'}")
    return 0


def _parse_levels(text: str):
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"bad --levels value {text!r}")


def cmd_experiment(args) -> int:
    options = resolve_options(_collect_train_values(args), args.config)
    bundle = load_bundle_dir(args.data)
    config = build_train_config(options, bundle.graph.num_nodes)
    out = Path(args.out)
    _snapshot_options(options, out)
    seeds = tuple(range(args.seeds)) if args.seed_list is None else \
        tuple(int(s) for s in args.seed_list.split(","))

    if args.protocol == "noise":
        report = noise_robustness_experiment(
            bundle, config, levels=_parse_levels(args.levels),
            methods=tuple(args.methods.split(",")), seeds=seeds, out_dir=out, jobs=args.jobs)
    elif args.protocol == "ablation":
        report = ablation_experiment(bundle, config, seeds=seeds, out_dir=out, jobs=args.jobs)
    else:
        axes = (args.axis,) if args.axis else ("alpha", "beta", "D")
        report = hyperparameter_sweep(bundle, config, seeds=seeds, axes=axes,
                                      out_dir=out, jobs=args.jobs)
    n_rows = len(report["rows"])
    n_failed = len(report["failures"])
    print(f"{args.protocol} experiment: {n_rows} cells, {n_failed} failed")
    print(f"report: {out / 'report.json'}")
    if n_failed:
        for cell in report["failures"]:
            print(f"  failed: {cell}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanflow",
        description="physics-guided urban flow prediction with active sample reweighting")
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", help="build a tensor-bundle dataset directory")
    prep.add_argument("--synthetic", action="store_true",
                      help="generate conservation-law data with corruption labels")
    prep.add_argument("--convert", default=None, metavar="DUMP_DIR",
                      help="convert a published research dump ({train,val,test}.npz)")
    prep.add_argument("--out", required=True)
    prep.add_argument("--h", type=int, default=4, help="grid rows (synthetic)")
    prep.add_argument("--w", type=int, default=4, help="grid cols (synthetic)")
    prep.add_argument("--steps", type=int, default=3000)
    prep.add_argument("--t-in", type=int, default=8)
    prep.add_argument("--corruption", type=float, default=0.0)
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--amplitude", type=float, default=4.0)
    prep.add_argument("--w-s", type=float, default=0.3)
    prep.add_argument("--w-r", type=float, default=0.3)
    prep.add_argument("--neighborhood", choices=("four", "eight"), default="eight")
    prep.add_argument("--interval", type=int, default=None, help="minutes per step (convert)")
    prep.add_argument("--grid-height", type=int, default=None)
    prep.add_argument("--grid-width", type=int, default=None)
    prep.set_defaults(func=cmd_prepare)

    train = sub.add_parser("train", help="train one method on a prepared bundle")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    _add_train_flags(train)
    train.set_defaults(func=cmd_train)

    exp = sub.add_parser("experiment", help="run an experiment protocol")
    exp.add_argument("protocol", choices=("noise", "ablation", "sweep"))
    exp.add_argument("--data", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--levels", default="0.1,0.3,0.5")
    exp.add_argument("--methods", default="pn,pgasr")
    exp.add_argument("--seeds", type=int, default=4, help="number of seeds (0..n-1)")
    exp.add_argument("--seed-list", default=None, help="explicit comma-separated seeds")
    exp.add_argument("--axis", choices=tuple(SWEEP_GRIDS), default=None)
    exp.add_argument("--jobs", type=int, default=1)
    _add_train_flags(exp)
    exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UrbanFlowError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
