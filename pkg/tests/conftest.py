import numpy as np
import pytest

from urbanflow.data import SyntheticConfig, generate_synthetic
from urbanflow.graph import build_grid_graph, scaled_laplacian
from urbanflow.model import ModelConfig
from urbanflow.pipeline import TrainConfig


def tiny_synthetic(n_steps=140, corruption=0.0, seed=3, height=2, width=2, t_in=4):
    """A bundle small enough for second-scale pipeline tests."""
    return generate_synthetic(SyntheticConfig(
        height=height, width=width, n_steps=n_steps, t_in=t_in,
        corruption_fraction=corruption, seed=seed))


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(embed_dim=8, n_st_blocks=1, chebyshev_order=2, temporal_kernel=2,
                dropout_rate=0.1)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=16, max_epochs=2, patience_pretrain=2, patience_retrain=2,
                k_passes=3, seed=0, model=tiny_model_config())
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_bundle():
    return tiny_synthetic()


@pytest.fixture(scope="session")
def grid_2x3():
    return build_grid_graph(2, 3, "four")


@pytest.fixture(scope="session")
def op_2x3(grid_2x3):
    return scaled_laplacian(grid_2x3, 2)


def random_symmetric_graph(n_nodes: int, seed: int):
    """Connected-ish random binary adjacency for oracle tests."""
    from urbanflow.graph import graph_from_adjacency
    rng = np.random.default_rng(seed)
    while True:
        a = (rng.random((n_nodes, n_nodes)) < 0.5).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        if (a.sum(axis=1) > 0).all():
            return graph_from_adjacency(1, n_nodes, a)
