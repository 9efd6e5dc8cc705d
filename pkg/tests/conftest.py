import numpy as np
import pytest

from improper_rl.envs import tabular as tb


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def nonconcavity():
    return tb.build_nonconcavity_example(1.0, 0.9)

