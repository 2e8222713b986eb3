import numpy as np
import pytest

from taxocodec.config import ExperimentConfig
from taxocodec.taskbench import TASKS, SceneDataset, TaskBench, TaskNet


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-second training runs and cross-process checks")


def tiny_config(**overrides) -> ExperimentConfig:
    """Desk-scale settings: a few steps on small codecs."""
    values = dict(
        train_count=16, val_count=8, test_count=8, pretrain_steps=0,
        latent_channels=4, hidden_channels=8, hyper_dim=4, tau=3, n_priors=4, codebook_size=4,
        common_channels=4, steps=2, unseen_steps=2, batch_size=2, val_items=4, eval_items=3,
        seeds=[0], lambda_grid="0.5,2",
    )
    values.update(overrides)
    return ExperimentConfig(**values)


@pytest.fixture(scope="session")
def tiny_bench():
    """Untrained but frozen task nets on a few generated scenes."""
    return TaskBench(
        train=SceneDataset.generate(0, 16, "train"),
        val=SceneDataset.generate(0, 8, "val"),
        test=SceneDataset.generate(0, 8, "test"),
        nets={t: TaskNet(t, seed=0).freeze() for t in TASKS},
    )


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
