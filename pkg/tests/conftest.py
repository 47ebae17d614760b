"""Pytest configuration and fixtures for itl-simulator tests."""

import numpy as np
import pytest

from itl_sim.config import ExperimentConfig, ScenarioConfig
from itl_sim.data_centers import make_synthetic_task
from itl_sim.federation import SWT, RunSpec, TrainingPolicy
from itl_sim.regularizers import RegularizerSettings
from itl_sim.tensor_nn import MultiHead, init_params, mlp_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_centers():
    """Three well-separated 3-class centers with 12/4/4 instances per class."""
    return make_synthetic_task(
        num_classes=3,
        dim=6,
        per_center_counts=(12, 4, 4),
        num_centers=3,
        seed=0,
        cluster_std=0.1,
        mean_spread=0.3,
    )


@pytest.fixture
def tiny_model():
    return mlp_spec(6, [8], 3)


@pytest.fixture
def tiny_multi_model():
    return mlp_spec(6, [8], 3, MultiHead(3))


@pytest.fixture
def tiny_params(tiny_model):
    return init_params(tiny_model, seed=3)


@pytest.fixture
def fast_policy():
    return TrainingPolicy(batch_size=12, lr=0.01, e_val=3, e_stop=6)


@pytest.fixture
def make_run_spec(tiny_model, fast_policy):
    """Factory for short SWT runs over the tiny centers."""

    def _make(method="ft", lam=1.0, epochs=3, model=None, schedule=None, seed=0, **settings):
        return RunSpec(
            model=model or tiny_model,
            schedule=schedule or SWT(epochs),
            policy=fast_policy,
            regularizer=RegularizerSettings(method=method, lam=lam, ebll_epochs=5, **settings),
            seed=seed,
            scenario="tiny",
        )

    return _make


@pytest.fixture
def tiny_config(tmp_path):
    """A complete experiment config small enough to run in a couple of seconds."""
    config = ExperimentConfig(
        name="tiny",
        methods=["ft", "ewc"],
        scenarios=[ScenarioConfig(name="iid")],
        repeats=2,
        output_dir=str(tmp_path / "results"),
    )
    config.task.num_classes = 3
    config.task.dim = 6
    config.task.num_centers = 3
    config.task.per_center_counts = [12, 4, 4]
    config.task.cluster_std = 0.1
    config.task.mean_spread = 0.3
    config.model.hidden = [8]
    config.schedule.kind = "swt"
    config.schedule.epochs_per_center = 2
    config.optimizer.batch_size = 12
    config.optimizer.lr = 0.01
    return config


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers",
        "slow: marks tests as slow (deselect with '-m \"not slow\"')",
    )
    config.addinivalue_line("markers", "integration: marks end-to-end runs through the runner and CLI")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")
