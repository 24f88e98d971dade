import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from resexp.harness import (
    Datasets,
    OptimizerConfig,
    SyntheticTask,
    default_spec,
    materialize_task,
    train_base,
)
from resexp.netmodel import Model


@pytest.fixture(scope="session")
def small_task():
    return SyntheticTask(M=256, K=256, M_proxy=1024, seed=3, input_dim=8, classes=3)


@pytest.fixture(scope="session")
def small_data(small_task):
    return materialize_task(small_task)


@pytest.fixture(scope="session")
def small_trained(small_task, small_data):
    spec = default_spec(small_task, depth=2, width=8)
    result = train_base(small_data, spec, OptimizerConfig(lr=0.05, steps=200,
                                                          batch_size=64), seed=1)
    return Model(spec, result.state)
