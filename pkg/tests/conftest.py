"""Shared fixtures: a tiny model configuration, a small on-disk dataset,
and a briefly pretrained model so scoring and search tests run against
weights with actual structure."""

import numpy as np
import pytest

from elastiseg.data import load_dataset, make_dataset
from elastiseg.model import ModelConfig, init_weights
from elastiseg.space import build_search_space, layer_importance
from elastiseg.tensor import reset_tape
from elastiseg.train import TrainConfig, pretrain


@pytest.fixture(autouse=True)
def clean_tape():
    """Keep the autodiff tape empty across tests, even after failures."""
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Three layers, 17 tokens: big enough to exercise every code path."""
    return ModelConfig(image_size=64, patch_size=16, embed_dim=16,
                       num_heads=2, num_layers=3, mlp_dim=32)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    make_dataset(str(path), 48, 24, seed=3)
    return str(path)


@pytest.fixture(scope="session")
def dataset(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture(scope="session")
def trained_tiny(tiny_cfg, dataset):
    """A tiny model pretrained for a moment; treat as read-only, copy to
    mutate."""
    train_set, val_set = dataset
    weights = init_weights(tiny_cfg, 0)
    tc = TrainConfig(steps=60, lr=3e-4, batch_size=8, seed=0,
                     eval_interval=60, eval_samples=16)
    pretrain(weights, train_set, val_set, tc)
    return weights


@pytest.fixture(scope="session")
def tiny_space(trained_tiny, dataset):
    """A wanda-reordered space over the tiny model; returns (space, weights).

    One prunable layer and a two-entry menu keep the space small enough to
    enumerate. The weights are the reordered copy the space refers to."""
    from elastiseg.data import as_batches

    train_set, _ = dataset
    importance = layer_importance(trained_tiny, train_set[:16])
    calib = as_batches(train_set, 8, limit_batches=2)
    space, reordered = build_search_space(
        importance, k_prunable=1, shield_top=1, window_fractions=[0.5],
        theta=0.5, scorer="wanda", weights=trained_tiny, calib=calib)
    return space, reordered
