import numpy as np
import pytest
import torch

from volgen.config import ModelConfig, TrainConfig

TINY_MODEL = ModelConfig(critic_channels=(2, 3, 4, 5), generator_channels=5, code_hidden=6)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("VOLGEN_SEED", raising=False)


@pytest.fixture
def tiny_configs():
    tc = TrainConfig(volume_size=16, latent_size=8, total_steps=3, checkpoint_interval=2)
    return tc, TINY_MODEL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
