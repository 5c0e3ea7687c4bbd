"""
Shared fixtures for the test suite.
"""

import numpy as np
import pytest
import yaml

from iwsgd.data import gen_gaussian_blobs
from iwsgd.net import DenseParams, NetworkParams, NoiseMode, NoiseSpec, mlp_spec
from iwsgd.trainer import Budget, TrainConfig

LN4 = np.log(4.0)


@pytest.fixture
def worked_instance():
    """One relu unit with keep 0.5: p(y=0 | mask=1) = 0.8, p(y=0 | mask=0) = 0.2."""
    spec = mlp_spec([1, 1, 2], "relu", NoiseSpec(NoiseMode.BERNOULLI, keep_prob=0.5))
    params = NetworkParams([
        DenseParams(np.array([[1.0]]), np.array([0.0])),
        DenseParams(np.array([[LN4], [-LN4]]), np.array([np.log(0.2), np.log(0.8)])),
    ])
    return spec, params, np.array([1.0]), 0


@pytest.fixture
def small_dataset():
    return gen_gaussian_blobs(n_per_class=40, num_classes=3, dim=2, radius=2.0, sigma=0.7, seed=0)


@pytest.fixture
def make_train_config():
    def make(samples=2, budget=20, kind="updates", seed=3, **overrides):
        noise = NoiseSpec(NoiseMode.BERNOULLI, keep_prob=0.5)
        options = dict(
            network=mlp_spec([2, 8, 3], "relu", noise),
            noise=noise,
            samples=samples,
            learning_rate=0.05,
            budget=Budget(kind, budget),
            master_seed=seed,
            eval_every=5,
            batch_size=8,
        )
        options.update(overrides)
        return TrainConfig(**options)
    return make


@pytest.fixture
def write_config(tmp_path):
    """Write a YAML config into tmp_path and return its path."""
    def write(name="config.yaml", **values):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(values), encoding="utf-8")
        return str(path)
    return write


@pytest.fixture
def tiny_train_values(tmp_path):
    return dict(
        dataset="blobs",
        data_seed=5,
        n_per_class=20,
        num_classes=2,
        dim=2,
        radius=1.5,
        data_sigma=0.6,
        hidden=[6],
        keep_prob=0.5,
        samples=2,
        learning_rate=0.05,
        batch_size=8,
        budget=12,
        master_seed=4,
        eval_every=4,
        output_dir=str(tmp_path / "out"),
    )
