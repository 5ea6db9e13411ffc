"""Shared fixtures: the desk-scale task and a pre-trained base learner."""

import numpy as np
import pytest

from acraft import dataio, fscil


@pytest.fixture(scope="session")
def desk_dataset():
    return dataio.make_synthetic(40, 50, 32, 6.0, seed=0)


@pytest.fixture(scope="session")
def desk_split(desk_dataset):
    return dataio.build_splits(desk_dataset, 20, 4, 5, 5, 30, seed=0)


@pytest.fixture(scope="session")
def desk_state(desk_split, desk_dataset):
    return fscil.train_base(desk_split, desk_dataset, seed=0)


@pytest.fixture(scope="session")
def desk_clean(desk_split, desk_dataset, desk_state):
    return fscil.run_protocol(desk_split, desk_dataset, seed=0, base_state=desk_state)


@pytest.fixture(scope="session")
def tiny_task():
    """Smaller task for fast attack/evaluator tests."""
    ds = dataio.make_synthetic(12, 20, 8, 6.0, seed=1)
    split = dataio.build_splits(ds, 6, 2, 3, 5, 10, seed=1)
    cfg = fscil.FscilConfig(epochs=30, hidden=(16, 8))
    state = fscil.train_base(split, ds, cfg, seed=1)
    return ds, split, cfg, state
