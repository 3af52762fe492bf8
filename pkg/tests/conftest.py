import pytest
import torch

from chorus.data import DatasetSpec, build_dataset
from chorus.model import ModelConfig, init_params


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(DatasetSpec(n_train=64, n_eval=20, n_hetero=16, candidate_pool_size=10, seed=3))


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=2, num_heads=2, d_model=16, d_ff=32, k_chorus=4, max_seq=160)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0, dtype=torch.float64)
