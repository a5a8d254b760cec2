"""Dataset handling: public tensor-bundle dumps, the synthetic conservation-law
generator, standardization, chronological splitting, and Gaussian noise injection.

All randomness flows from explicit integer seeds. Bundles are treated as
immutable: every mutating operation returns a new bundle.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import UrbanGraph, build_grid_graph
from .seeding import derive_seed

SPLIT_NAMES = ("train", "val", "test")
TENSOR_KEYS = ("train_x", "train_y", "val_x", "val_y", "test_x", "test_y")


@dataclass(frozen=True)
class FlowSample:
    """One supervised example: input window x (T_in, M, 2) and target y (M, 2).

    Channel 0 is inflow, channel 1 outflow. `corrupted` is ground truth for
    synthetic / noise-injected data and stays False for real dumps.
    """

    sample_id: int
    x: np.ndarray
    y: np.ndarray
    corrupted: bool = False


@dataclass(frozen=True)
class Standardizer:
    """Per-channel affine transform fit on the training inputs only."""

    mean: np.ndarray  # shape (2,)
    std: np.ndarray   # shape (2,)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        std = np.asarray(self.std, dtype=np.float64).reshape(2)
        if np.any(std <= 0):
            raise DataError("standardizer std must be positive for both channels "
                            "(constant channel in the training data?)")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return ((values - self.mean) / self.std).astype(values.dtype, copy=False)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return (values * self.std + self.mean).astype(values.dtype, copy=False)


class SampleSet:
    """A split stored as stacked arrays with per-sample ids and corruption flags."""

    def __init__(self, x: np.ndarray, y: np.ndarray, ids: np.ndarray,
                 corrupted: np.ndarray | None = None):
        x = np.asarray(x, dtype=np.float32)
        y = np.asarray(y, dtype=np.float32)
        ids = np.asarray(ids, dtype=np.int64)
        if corrupted is None:
            corrupted = np.zeros(len(ids), dtype=bool)
        corrupted = np.asarray(corrupted, dtype=bool)
        if not (len(x) == len(y) == len(ids) == len(corrupted)):
            raise DataError("split arrays disagree on sample count")
        if x.ndim != 4 or y.ndim != 3 or x.shape[2] != y.shape[1] or x.shape[3] != 2 or y.shape[2] != 2:
            raise DataError(f"bad split shapes x={x.shape} y={y.shape}")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DataError("split contains NaN/Inf values")
        self.x, self.y, self.ids, self.corrupted = x, y, ids, corrupted

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> FlowSample:
        return FlowSample(sample_id=int(self.ids[i]), x=self.x[i], y=self.y[i],
                          corrupted=bool(self.corrupted[i]))

    @property
    def num_nodes(self) -> int:
        return self.x.shape[2]

    @property
    def window_length(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "SampleSet":
        return SampleSet(self.x.copy(), self.y.copy(), self.ids.copy(), self.corrupted.copy())

    def subset(self, index: np.ndarray) -> "SampleSet":
        return SampleSet(self.x[index], self.y[index], self.ids[index], self.corrupted[index])


@dataclass(frozen=True)
class DatasetBundle:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    standardizer: Standardizer
    graph: UrbanGraph
    provenance: str  # "public_dump" | "synthetic"
    interval_minutes: int
    standardized: bool = True

    def __post_init__(self):
        all_ids = np.concatenate([self.train.ids, self.val.ids, self.test.ids])
        if len(np.unique(all_ids)) != len(all_ids):
            raise DataError("sample_ids must be unique across splits")
        m = self.graph.num_nodes
        for name in SPLIT_NAMES:
            split = getattr(self, name)
            if split.num_nodes != m:
                raise DataError(f"{name} split has {split.num_nodes} nodes, graph has {m}")

    def splits(self):
        return {name: getattr(self, name) for name in SPLIT_NAMES}


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the conservation-law simulator."""

    height: int = 4
    width: int = 4
    n_steps: int = 3000
    t_in: int = 8
    w_s_true: float = 0.3
    w_r_true: float = 0.3
    source_amplitude: float = 4.0
    transport_rate: float = 0.1
    corruption_fraction: float = 0.0
    seed: int = 0
    neighborhood: str = "eight"
    demand_period: int = 48
    base_density: float = 8.0
    corrupt_inputs_only: bool = False

    def __post_init__(self):
        if not (0.0 <= self.corruption_fraction <= 1.0):
            raise DataError("corruption_fraction must lie in [0, 1]")
        if self.n_steps <= self.t_in + 1:
            raise DataError("n_steps must exceed t_in + 1")
        if self.w_s_true < 0 or self.w_r_true < 0:
            raise DataError("flux coefficients must be non-negative")


def _smooth_field(rng: np.random.Generator, graph: UrbanGraph, rounds: int = 4) -> np.ndarray:
    """White noise relaxed by repeated neighbor averaging, recentered to zero
    mean and unit spread (neighbors end up strongly correlated)."""
    v = rng.standard_normal(graph.num_nodes)
    mix = 0.5 * np.eye(graph.num_nodes) + 0.5 * graph.row_normalized_adjacency
    for _ in range(rounds):
        v = mix @ v
    v = v - v.mean()
    spread = v.std()
    return v / spread if spread > 0 else v


def simulate_density_timeline(cfg: SyntheticConfig, graph: UrbanGraph | None = None):
    """Run the discrete density update and derive flow channels from it.

    Returns (z, flows, laplacian): z has shape (n_steps+1, M) in float64,
    flows has shape (n_steps, M, 2) with channel 0 inflow / 1 outflow, and
    every step satisfies z[t+1] = z[t] + w_s*(L @ s_t) - w_r*(L @ r_t) exactly
    (L = combinatorial Laplacian, which conserves total density).

    Outflow of node i is degree-split transport along positive density
    differences; inflow is the transposed transport plus an exogenous smooth
    periodic demand term on both channels, so flows stay non-negative and the
    field never goes static.
    """
    if graph is None:
        graph = build_grid_graph(cfg.height, cfg.width, cfg.neighborhood)
    rng = np.random.default_rng(derive_seed(cfg.seed, "simulate"))
    m = graph.num_nodes
    a = graph.adjacency
    lap = graph.combinatorial_laplacian()
    deg = graph.degrees

    z = np.empty((cfg.n_steps + 1, m), dtype=np.float64)
    flows = np.empty((cfg.n_steps, m, 2), dtype=np.float64)
    z[0] = cfg.base_density * (1.0 + 0.15 * _smooth_field(rng, graph))
    z[0] = np.clip(z[0], 0.1 * cfg.base_density, None)

    # Demand = spatially textured constant base + slow shared cycle. The rough
    # base keeps every clean sample at a stationary, narrow-band conservation
    # deviation (no sample gets arbitrarily close to perfect conservation and
    # dominates min-max scaling); the full-swing cycle supplies most of the
    # flow variance, which is what corruption is measured against.
    base_in = np.clip(0.35 * (1.0 + 0.12 * _smooth_field(rng, graph, rounds=1)), 0.05, None)
    base_out = np.clip(0.35 * (1.0 + 0.12 * _smooth_field(rng, graph, rounds=1)), 0.05, None)
    rho_in = np.clip(0.6 + 0.1 * _smooth_field(rng, graph), 0.05, None)
    rho_out = np.clip(0.6 + 0.1 * _smooth_field(rng, graph), 0.05, None)
    phase = 0.2 * _smooth_field(rng, graph)
    omega = 2.0 * np.pi / cfg.demand_period

    for t in range(cfg.n_steps):
        diff = z[t][:, None] - z[t][None, :]
        transport = cfg.transport_rate * a * np.maximum(diff, 0.0) / deg[:, None]
        out_t = transport.sum(axis=1)
        in_t = transport.sum(axis=0)
        cycle = 0.5 * (1.0 + np.sin(omega * t + phase))
        s_t = np.maximum(in_t + cfg.source_amplitude * (base_in + rho_in * cycle), 0.0)
        r_t = np.maximum(out_t + cfg.source_amplitude * (base_out + rho_out * cycle), 0.0)
        flows[t, :, 0] = s_t
        flows[t, :, 1] = r_t
        z[t + 1] = z[t] + cfg.w_s_true * (lap @ s_t) - cfg.w_r_true * (lap @ r_t)
        if np.abs(z[t + 1]).max() > 1e6:
            raise DataError("synthetic simulation diverged (|z| > 1e6); "
                            "reduce w_s_true/w_r_true or transport_rate")
    return z, flows, lap


def _window_timeline(flows: np.ndarray, t_in: int):
    n_steps = flows.shape[0]
    n_samples = n_steps - t_in
    x = np.stack([flows[t:t + t_in] for t in range(n_samples)]).astype(np.float32)
    y = flows[t_in:].astype(np.float32)
    ids = np.arange(n_samples, dtype=np.int64)
    return x, y, ids


def chronological_split_sizes(n: int) -> tuple[int, int, int]:
    """7:1:2 split sizes (train/val/test), rounding train and val."""
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} samples are too few for a 7:1:2 split")
    return n_train, n_val, n_test


def fit_standardizer(train_x: np.ndarray) -> Standardizer:
    mean = train_x.reshape(-1, 2).mean(axis=0)
    std = train_x.reshape(-1, 2).std(axis=0)
    return Standardizer(mean=mean, std=std)


def standardize_bundle(bundle: DatasetBundle) -> DatasetBundle:
    """Apply the bundle's standardizer to every split (no-op when standardized)."""
    if bundle.standardized:
        return bundle
    st = bundle.standardizer
    new_splits = {}
    for name, split in bundle.splits().items():
        new_splits[name] = SampleSet(st.transform(split.x), st.transform(split.y),
                                     split.ids, split.corrupted)
    return replace(bundle, standardized=True, **new_splits)


def destandardize(values: np.ndarray, standardizer: Standardizer) -> np.ndarray:
    return standardizer.inverse(values)


def generate_synthetic(cfg: SyntheticConfig) -> DatasetBundle:
    """Simulate, window (stride 1), split 7:1:2 chronologically, standardize,
    then corrupt a seeded fraction of the training samples in standardized space."""
    graph = build_grid_graph(cfg.height, cfg.width, cfg.neighborhood)
    _, flows, _ = simulate_density_timeline(cfg, graph)
    x, y, ids = _window_timeline(flows, cfg.t_in)
    n_train, n_val, _ = chronological_split_sizes(len(ids))

    sl = {"train": slice(0, n_train),
          "val": slice(n_train, n_train + n_val),
          "test": slice(n_train + n_val, len(ids))}
    standardizer = fit_standardizer(x[sl["train"]])
    splits = {name: SampleSet(standardizer.transform(x[s]), standardizer.transform(y[s]), ids[s])
              for name, s in sl.items()}

    if cfg.corruption_fraction > 0:
        n_corrupt = int(round(cfg.corruption_fraction * n_train))
        splits["train"] = _replace_with_noise(
            splits["train"], n_corrupt, derive_seed(cfg.seed, "corrupt"),
            inputs_only=cfg.corrupt_inputs_only)

    return DatasetBundle(train=splits["train"], val=splits["val"], test=splits["test"],
                         standardizer=standardizer, graph=graph, provenance="synthetic",
                         interval_minutes=30, standardized=True)


def _replace_with_noise(split: SampleSet, n_corrupt: int, seed: int,
                        inputs_only: bool = False, noise_std: float = 1.0) -> SampleSet:
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(split), size=n_corrupt, replace=False)
    out = split.copy()
    for i in np.sort(chosen):
        out.x[i] = (noise_std * rng.standard_normal(out.x[i].shape)).astype(np.float32)
        if not inputs_only:
            out.y[i] = (noise_std * rng.standard_normal(out.y[i].shape)).astype(np.float32)
        out.corrupted[i] = True
    return out


def inject_noise(bundle: DatasetBundle, level: float, seed: int,
                 inputs_only: bool = False, noise_std: float = 1.0) -> DatasetBundle:
    """Replace floor(level*|train|) training samples with standard Gaussian draws
    in standardized space. Validation/test splits are untouched."""
    if not (0.0 < level <= 1.0):
        raise DataError(f"noise level must lie in (0, 1], got {level}")
    if not bundle.standardized:
        raise DataError("inject_noise expects a standardized bundle")
    n_replace = int(np.floor(level * len(bundle.train)))
    train = _replace_with_noise(bundle.train, n_replace, derive_seed(seed, "inject"),
                                inputs_only=inputs_only, noise_std=noise_std)
    return replace(bundle, train=train)


# ---------------------------------------------------------------------------
# Tensor-bundle directory format
# ---------------------------------------------------------------------------

def _write_tensor(path: Path, arr: np.ndarray):
    np.ascontiguousarray(arr, dtype="<f4").tofile(str(path))


def _read_tensor(path: Path, shape, name: str) -> np.ndarray:
    expected = int(np.prod(shape))
    raw = np.fromfile(str(path), dtype="<f4")
    if raw.size != expected:
        raise DataError(f"tensor {name!r}: file {path.name} holds {raw.size} floats, "
                        f"manifest says {expected}")
    return raw.reshape(shape)


def write_bundle_dir(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    """Persist a bundle as manifest.json + raw little-endian float32 tensors.

    Synthetic bundles additionally record corrupted_ids.csv (sample_id, flag)
    so downstream evaluation can use ground-truth corruption labels.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": 1,
        "provenance": bundle.provenance,
        "interval_minutes": bundle.interval_minutes,
        "standardized": bundle.standardized,
        "height": bundle.graph.height,
        "width": bundle.graph.width,
        "neighborhood": bundle.graph.neighborhood,
        "standardizer": {"mean": bundle.standardizer.mean.tolist(),
                         "std": bundle.standardizer.std.tolist()},
        "tensors": {},
    }
    for name, split in bundle.splits().items():
        for kind, arr in (("x", split.x), ("y", split.y)):
            key = f"{name}_{kind}"
            fname = f"{key}.f32"
            _write_tensor(out / fname, arr)
            manifest["tensors"][key] = {"dtype": "float32", "shape": list(arr.shape), "file": fname}
        np.ascontiguousarray(split.ids, dtype="<i8").tofile(str(out / f"{name}_ids.i64"))
        manifest["tensors"][f"{name}_ids"] = {"dtype": "int64",
                                              "shape": [len(split.ids)],
                                              "file": f"{name}_ids.i64"}
    if bundle.provenance == "synthetic":
        with open(out / "corrupted_ids.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "corrupted"])
            for split in bundle.splits().values():
                for sid, flag in zip(split.ids.tolist(), split.corrupted.tolist()):
                    writer.writerow([sid, int(flag)])
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def load_bundle_dir(path: str | Path, graph: UrbanGraph | None = None) -> DatasetBundle:
    """Load a tensor-bundle directory written by write_bundle_dir / the converter."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    tensors = manifest.get("tensors", {})
    for key in TENSOR_KEYS:
        if key not in tensors:
            raise DataError(f"manifest is missing tensor {key!r}")

    if graph is None:
        graph = build_grid_graph(manifest["height"], manifest["width"],
                                 manifest.get("neighborhood", "eight"))

    arrays = {}
    for key in TENSOR_KEYS:
        meta = tensors[key]
        if meta.get("dtype") != "float32":
            raise DataError(f"tensor {key!r}: unsupported dtype {meta.get('dtype')!r}")
        arr = _read_tensor(root / meta["file"], meta["shape"], key)
        if np.isnan(arr).any() or np.isinf(arr).any():
            raise DataError(f"tensor {key!r} contains NaN/Inf values")
        arrays[key] = arr

    corrupted_by_id: dict[int, bool] = {}
    flags_path = root / "corrupted_ids.csv"
    if flags_path.exists():
        with open(flags_path) as fh:
            for row in csv.DictReader(fh):
                corrupted_by_id[int(row["sample_id"])] = bool(int(row["corrupted"]))

    splits = {}
    for name in SPLIT_NAMES:
        x = arrays[f"{name}_x"]
        y = arrays[f"{name}_y"]
        if y.ndim == 4 and y.shape[1] == 1:
            y = y[:, 0]
        ids_meta = tensors.get(f"{name}_ids")
        if ids_meta is not None:
            ids = np.fromfile(str(root / ids_meta["file"]), dtype="<i8")
        else:
            base = {"train": 0, "val": 10**7, "test": 2 * 10**7}[name]
            ids = base + np.arange(len(x), dtype=np.int64)
        if x.shape[2] != graph.num_nodes:
            raise DataError(f"tensor {name}_x has {x.shape[2]} nodes, graph has {graph.num_nodes}")
        corrupted = np.array([corrupted_by_id.get(int(i), False) for i in ids], dtype=bool)
        splits[name] = SampleSet(x, y, ids, corrupted)

    standardized = bool(manifest.get("standardized", False))
    st_meta = manifest.get("standardizer")
    if st_meta is not None:
        standardizer = Standardizer(np.array(st_meta["mean"]), np.array(st_meta["std"]))
    else:
        standardizer = fit_standardizer(splits["train"].x)
    bundle = DatasetBundle(train=splits["train"], val=splits["val"], test=splits["test"],
                           standardizer=standardizer, graph=graph,
                           provenance=manifest.get("provenance", "public_dump"),
                           interval_minutes=int(manifest.get("interval_minutes", 30)),
                           standardized=standardized)
    return bundle if standardized else standardize_bundle(bundle)


def load_public_bundle(path: str | Path, graph: UrbanGraph) -> DatasetBundle:
    """Load a public prewindowed dump in tensor-bundle format, keeping its splits.

    Raw flows must be non-negative and finite; the standardizer is fit on the
    training inputs and the returned bundle is standardized.
    """
    bundle = load_bundle_dir(path, graph)
    if bundle.provenance == "synthetic":
        raise DataError("load_public_bundle expects a public dump, got a synthetic bundle")
    return bundle


DUMP_INTERVALS = {"nycbike1": 60, "nycbike2": 30, "nyctaxi": 30, "bjtaxi": 30}


def convert_research_dump(src_dir: str | Path, out_dir: str | Path,
                          interval_minutes: int | None = None,
                          height: int | None = None, width: int | None = None) -> Path:
    """One-shot converter from the published dump layout ({train,val,test}.npz
    with keys 'x' and 'y') into the tensor-bundle directory format."""
    src = Path(src_dir)
    arrays = {}
    for name in SPLIT_NAMES:
        npz_path = src / f"{name}.npz"
        if not npz_path.exists():
            raise DataError(f"research dump is missing {npz_path.name}")
        with np.load(str(npz_path)) as npz:
            if "x" not in npz or "y" not in npz:
                raise DataError(f"{npz_path.name} lacks 'x'/'y' arrays")
            x = np.asarray(npz["x"], dtype=np.float32)
            y = np.asarray(npz["y"], dtype=np.float32)
        if y.ndim == 4 and y.shape[1] == 1:
            y = y[:, 0]
        if np.isnan(x).any() or np.isnan(y).any():
            raise DataError(f"{name} split contains NaN values")
        if x.min() < 0 or y.min() < 0:
            raise DataError(f"{name} split contains negative raw flows")
        arrays[name] = (x, y)

    m = arrays["train"][0].shape[2]
    if interval_minutes is None:
        interval_minutes = DUMP_INTERVALS.get(src.name.lower(), 30)
    if height is None or width is None:
        height, width = _infer_grid_dims(m)
    graph = build_grid_graph(height, width, "eight")

    splits = {}
    offset = 0
    for name in SPLIT_NAMES:
        x, y = arrays[name]
        ids = offset + np.arange(len(x), dtype=np.int64)
        offset += len(x)
        splits[name] = SampleSet(x, y, ids)
    standardizer = fit_standardizer(splits["train"].x)
    bundle = DatasetBundle(train=splits["train"], val=splits["val"], test=splits["test"],
                           standardizer=standardizer, graph=graph, provenance="public_dump",
                           interval_minutes=interval_minutes, standardized=False)
    return write_bundle_dir(standardize_bundle(bundle), out_dir)


KNOWN_GRIDS = {128: (16, 8), 200: (10, 20), 1024: (32, 32)}


def _infer_grid_dims(m: int) -> tuple[int, int]:
    if m in KNOWN_GRIDS:
        return KNOWN_GRIDS[m]
    side = int(np.sqrt(m))
    if side * side == m:
        return side, side
    raise DataError(f"cannot infer grid dims for M={m}; pass height/width explicitly")
