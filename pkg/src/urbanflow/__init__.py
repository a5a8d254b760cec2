"""Physics-guided urban flow prediction with active sample reweighting."""

from .data import (DatasetBundle, FlowSample, SampleSet, Standardizer, SyntheticConfig,
                   generate_synthetic, inject_noise, load_bundle_dir, load_public_bundle,
                   write_bundle_dir)
from .errors import (ConfigError, DataError, GraphError, TrainingError, UrbanFlowError)
from .evaluation import (MetricSet, ablation_experiment, compute_metrics,
                         hyperparameter_sweep, noise_robustness_experiment)
from .graph import (GraphOperator, UrbanGraph, build_grid_graph, scaled_laplacian)
from .model import (ModelConfig, PhysicsGuidedNet, build_model, load_checkpoint,
                    save_checkpoint)
from .pipeline import (RunResult, TrainConfig, run_pgasr, split_folds, train_pn_only,
                       weighted_loss)
from .reweighting import (WeightTable, build_weight_table, combine_scores,
                          minmax_normalize, model_uncertainty, normalize_weights,
                          physical_consistency)

__version__ = "0.1.0"
